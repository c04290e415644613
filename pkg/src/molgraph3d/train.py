"""Training and evaluation: losses, Adam, plateau-driven learning-rate
decay with early stopping, stratified cross-validation splits, and the
RMSE/MAE and AUC metrics.

Regression targets are standardized with training-set statistics before
the squared-error loss; metrics invert the scaler so errors come out in
original units.  Classification uses binary cross-entropy evaluated in
logit form, so the model's raw output (pre-squash) feeds the loss.
"""

from __future__ import annotations

import copy
import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gcn3d
from .chemper import FeatureConfig, build_graph_tensors
from .gcn3d import ModelConfig, ModelParams
from .numcore import NumericError


class TrainingError(RuntimeError):
    """Training diverged or could not start; carries the epoch index."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


class StratificationWarning(UserWarning):
    """Stratified splitting fell back to plain random assignment."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.001
    min_learning_rate: float = 0.0005
    decay_factor: float = 0.9
    plateau_patience: int = 10
    stop_patience: int = 15
    improvement_threshold: float = 1e-4
    max_epochs: int = 500
    folds: int = 10
    seed: int | tuple = 0  # entropy for the seed sequence; tuples label sub-streams

    def __post_init__(self):
        if self.min_learning_rate > self.learning_rate:
            raise ValueError("min learning rate exceeds initial learning rate")
        if self.plateau_patience <= 0 or self.stop_patience <= 0:
            raise ValueError("patiences must be positive")
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.folds <= 0:
            raise ValueError("batch size, epochs, and folds must be positive")


@dataclass
class TargetScaler:
    """Standardization over the training targets; identity for classification."""

    mean: float
    std: float
    task: str

    @classmethod
    def fit(cls, targets, task: str) -> "TargetScaler":
        if task == "classification":
            return cls(0.0, 1.0, task)
        arr = np.asarray(targets, dtype=np.float64)
        std = float(arr.std())
        if std <= 0.0:
            raise TrainingError("training targets are constant; cannot standardize")
        return cls(float(arr.mean()), std, task)

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# loss


def loss(prediction: float, target: float, task: str):
    """Loss value and its gradient with respect to the model output.

    Regression: squared error; both arguments live in standardized
    space.  Classification: binary cross-entropy of the logistic squash,
    folded into stable logit form, so ``prediction`` is the raw
    (pre-squash) output.
    """
    if not np.isfinite(prediction):
        raise NumericError(f"non-finite prediction {prediction!r}")
    if task == "regression":
        diff = prediction - target
        return diff * diff, 2.0 * diff
    if task == "classification":
        if target not in (0.0, 1.0):
            raise ValueError(f"classification target must be 0 or 1, got {target!r}")
        # softplus(p) - t p  ==  -[t ln s(p) + (1 - t) ln(1 - s(p))]
        value = float(np.logaddexp(0.0, prediction)) - target * prediction
        sig = gcn3d._logistic(prediction)
        return value, sig - target
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment buffers and the shared step count."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.value.data) for p in params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in params}
        self.step = 0


def adam_step(params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the gradients accumulated in
    each parameter's grad buffer."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value.data[...] = p.value.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# learning-rate plateau + early stop


class PlateauScheduler:
    """Decay-on-plateau with early stopping, two independent counters.

    An epoch improves when its loss beats the best seen by more than the
    absolute threshold.  After ``plateau_patience`` consecutive
    non-improving epochs the rate is multiplied by the decay factor
    (floored at the minimum rate) and the decay counter restarts; after
    ``stop_patience`` consecutive non-improving epochs training stops.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lr = config.learning_rate
        self.best = np.inf
        self._decay_wait = 0
        self._stop_wait = 0

    def update(self, val_loss: float):
        """Consume one epoch's validation loss; returns (lr, stop)."""
        c = self.config
        if val_loss < self.best - c.improvement_threshold:
            self.best = val_loss
            self._decay_wait = 0
            self._stop_wait = 0
            return self.lr, False
        self._decay_wait += 1
        self._stop_wait += 1
        if self._decay_wait >= c.plateau_patience:
            self.lr = max(self.lr * c.decay_factor, c.min_learning_rate)
            self._decay_wait = 0
        return self.lr, self._stop_wait >= c.stop_patience


# ---------------------------------------------------------------------------
# stratified cross-validation


@dataclass
class FoldSplit:
    train: list
    val: list
    test: list


def stratified_folds(records, k: int = 10, seed: int = 0,
                     task: str = "regression", quantile_bins: int = 10) -> list:
    """k folds of disjoint (train, val, test) index sets, roughly
    80/10/10 at k=10 with test fold f and validation fold (f+1) mod k.

    Classification stratifies per label; regression stratifies on
    ``quantile_bins`` target quantile bins.  A class smaller than k
    triggers a warning and a plain random split.
    """
    n = len(records)
    if n == 0:
        raise ValueError("empty dataset")
    targets = np.array([r.target for r in records], dtype=np.float64)
    rng = np.random.default_rng(seed)

    if task == "classification":
        groups = [np.flatnonzero(targets == lab) for lab in sorted(set(targets))]
        if any(0 < len(g) < k for g in groups):
            warnings.warn(f"a class has fewer than {k} members; falling back to "
                          "random assignment", StratificationWarning)
            groups = [np.arange(n)]
    else:
        order = np.argsort(targets, kind="mergesort")
        groups = [chunk for chunk in np.array_split(order, quantile_bins) if len(chunk)]

    buckets = [[] for _ in range(k)]
    cursor = 0
    for g in groups:
        g = g.copy()
        rng.shuffle(g)
        for idx in g:
            buckets[cursor % k].append(int(idx))
            cursor += 1
    folds = []
    for f in range(k):
        test = sorted(buckets[f])
        val = sorted(buckets[(f + 1) % k])
        train = sorted(i for b in range(k) if b not in (f, (f + 1) % k) for i in buckets[b])
        folds.append(FoldSplit(train=train, val=val, test=test))
    return folds


# ---------------------------------------------------------------------------
# the fit loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    params: ModelParams
    scaler: TargetScaler
    log: list
    best_epoch: int


def _stream_seeds(seed):
    """Derive independent init/shuffle streams from one root seed."""
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return init_ss, np.random.default_rng(shuffle_ss)


def fit(train_records, val_records, model_config: ModelConfig,
        train_config: TrainConfig, feature_config: FeatureConfig | None = None,
        graphs: dict | None = None) -> FitResult:
    """Train on mini-batches with Adam; keep the snapshot with the best
    validation loss.

    The batch gradient is the mean over the batch.  The scheduler sees
    the validation loss once per epoch.  Single-threaded runs with the
    same seed are bit-reproducible.  ``graphs`` may carry pre-built
    GraphTensors keyed by id(record) to avoid re-featurizing.
    """
    if not train_records or not val_records:
        raise TrainingError("need nonempty training and validation sets")
    task = model_config.task
    scaler = TargetScaler.fit([r.target for r in train_records], task)
    if graphs is None:
        graphs = {}
    def graph_of(rec):
        key = id(rec)
        if key not in graphs:
            graphs[key] = build_graph_tensors(rec.molecule, feature_config)
        return graphs[key]

    init_ss, shuffle_rng = _stream_seeds(train_config.seed)
    params = gcn3d.init_params(model_config, init_ss)
    plist = params.parameters()
    adam = AdamState(plist)
    sched = PlateauScheduler(train_config)

    train_targets = scaler.apply([r.target for r in train_records]) \
        if task == "regression" else np.array([r.target for r in train_records])
    val_targets = scaler.apply([r.target for r in val_records]) \
        if task == "regression" else np.array([r.target for r in val_records])

    log = []
    best_val = np.inf
    best_epoch = -1
    best_values = None
    lr = train_config.learning_rate
    n = len(train_records)
    for epoch in range(train_config.max_epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        try:
            for start in range(0, n, train_config.batch_size):
                batch = order[start:start + train_config.batch_size]
                params.zero_grad()
                for idx in batch:
                    res = gcn3d.forward(graph_of(train_records[idx]), params, model_config)
                    value, grad = loss(res.raw_output, float(train_targets[idx]), task)
                    gcn3d.backward(res, grad / len(batch))
                    epoch_loss += value
                adam_step(plist, adam, lr)
            train_loss = epoch_loss / n
            val_loss = 0.0
            for rec, tgt in zip(val_records, val_targets):
                res = gcn3d.forward(graph_of(rec), params, model_config)
                value, _ = loss(res.raw_output, float(tgt), task)
                val_loss += value
            val_loss /= len(val_records)
        except NumericError as exc:
            raise TrainingError(f"training diverged: {exc}", epoch=epoch) from None
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError("training diverged to a non-finite loss", epoch=epoch)
        log.append(EpochRecord(epoch, train_loss, val_loss, lr))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_values = {p.name: p.value.data.copy() for p in plist}
        lr, stop = sched.update(val_loss)
        if stop:
            break
    for p in plist:
        p.value.data[...] = best_values[p.name]
    params.zero_grad()
    return FitResult(params=params, scaler=scaler, log=log, best_epoch=best_epoch)


def predict(params: ModelParams, records, scaler: TargetScaler | None = None,
            feature_config: FeatureConfig | None = None) -> np.ndarray:
    """Model outputs for a record list: original units for regression
    (when a scaler is given), probabilities for classification."""
    out = []
    for rec in records:
        res = gcn3d.forward(build_graph_tensors(rec.molecule, feature_config), params)
        out.append(res.prediction)
    out = np.array(out, dtype=np.float64)
    if params.config.task == "regression" and scaler is not None:
        out = scaler.invert(out)
    return out


# ---------------------------------------------------------------------------
# metrics


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # 1-based midrank
        i = j + 1
    return ranks


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic (ties by midrank);
    equals trapezoidal integration of the ROC curve."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    npos = int((labels == 1).sum())
    nneg = int((labels == 0).sum())
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("AUC-ROC needs both classes present")
    ranks = _midranks(scores)
    return float((ranks[labels == 1].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall curve by step integration at
    every distinct score threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    npos = int((labels == 1).sum())
    if npos == 0 or int((labels == 0).sum()) == 0:
        raise UndefinedMetricError("AUC-PR needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = fp = 0
    area = 0.0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j + 1].sum())
        fp += (j - i + 1) - int(sorted_labels[i:j + 1].sum())
        recall = tp / npos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def metrics(predictions, targets, task: str) -> dict:
    """MAE/RMSE for regression (inputs already in original units),
    AUC-ROC/AUC-PR for classification."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(predictions) != len(targets):
        raise ValueError("length mismatch")
    if task == "regression":
        err = predictions - targets
        return {"mae": float(np.abs(err).mean()),
                "rmse": float(np.sqrt((err * err).mean()))}
    if task == "classification":
        return {"auc_roc": auc_roc(predictions, targets),
                "auc_pr": auc_pr(predictions, targets)}
    raise ValueError(f"unknown task {task!r}")


def summarize_folds(per_fold: list) -> dict:
    """Mean and sample standard deviation per metric across folds."""
    keys = sorted({k for fold in per_fold for k in fold})
    out = {}
    for key in keys:
        vals = np.array([fold[key] for fold in per_fold], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = {"mean": float(vals.mean()), "std": std}
    return out


# ---------------------------------------------------------------------------
# checkpoints carrying the scaler and featurization settings


def save_checkpoint(params: ModelParams, path, scaler: TargetScaler | None = None,
                    feature_config: FeatureConfig | None = None) -> None:
    extra = {}
    if scaler is not None:
        extra["target_scaler"] = {"mean": scaler.mean, "std": scaler.std,
                                  "task": scaler.task}
    if feature_config is not None:
        extra["feature_config"] = {"elements": list(feature_config.elements),
                                   "explicit_hydrogens": feature_config.explicit_hydrogens}
    gcn3d.save_params(params, path, extra=extra)


def load_checkpoint(path):
    """(params, scaler, feature_config); the latter two may be None for
    bare parameter files."""
    params = gcn3d.load_params(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    scaler = None
    if "target_scaler" in doc:
        block = doc["target_scaler"]
        scaler = TargetScaler(float(block["mean"]), float(block["std"]),
                              str(block["task"]))
    fc = None
    if "feature_config" in doc:
        block = doc["feature_config"]
        fc = FeatureConfig(elements=tuple(block["elements"]),
                           explicit_hydrogens=bool(block["explicit_hydrogens"]))
    return params, scaler, fc


# ---------------------------------------------------------------------------
# artifact writers


def write_training_log(log, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for rec in log:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.lr)])


def write_fold_assignments(folds, records, seed, path) -> None:
    doc = {
        "seed": seed,
        "folds": [
            {
                "train": [records[i].molecule.id for i in f.train],
                "val": [records[i].molecule.id for i in f.val],
                "test": [records[i].molecule.id for i in f.test],
            }
            for f in folds
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def write_metric_report(per_fold, path) -> None:
    doc = {"per_fold": per_fold, "summary": summarize_folds(per_fold)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
