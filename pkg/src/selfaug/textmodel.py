"""Hashed n-gram linear model: featurizer, SGD trainer, metrics.

The model is a linear softmax classifier (or linear regressor) over hashed
n-gram counts. It is convex, fast, and deterministic per seed, which is what
the rest of the pipeline needs: reproducible pseudo-labels and analyzable
training dynamics.
"""

from __future__ import annotations

import hashlib
import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.stats import spearmanr

from .corpus import Dataset, Example, LabelSpace, ValidationError

SEP_TOKEN = "\x1esep\x1e"

_TOKEN_RE = re.compile(r"[a-z0-9']+")


class ModelError(Exception):
    """Base class for model-layer errors."""


class NumericError(ModelError):
    """Training produced a non-finite loss or parameter."""


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    ngram_orders: frozenset[int] = frozenset({1, 2})
    hash_dim: int = 2 ** 18

    def __post_init__(self):
        if not self.ngram_orders:
            raise ValidationError("ngram_orders must be nonempty")
        if self.hash_dim <= 0 or (self.hash_dim & (self.hash_dim - 1)) != 0:
            raise ValidationError("hash_dim must be a power of two")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _hash_ngram(ngram: str, hash_dim: int) -> int:
    return zlib.crc32(ngram.encode("utf-8")) & (hash_dim - 1)


def featurize(example: Example, config: FeatureConfig) -> dict[int, int]:
    """Sparse bucket -> count mapping for one example.

    Segment pairs are joined with a reserved separator token before
    n-gramming, so (a, b) never collides with the single segment "a b".
    """
    tokens = tokenize(example.segment_a)
    if example.segment_b is not None:
        tokens = tokens + [SEP_TOKEN] + tokenize(example.segment_b)
    counts: dict[int, int] = {}
    for order in config.ngram_orders:
        for i in range(len(tokens) - order + 1):
            bucket = _hash_ngram("\x1f".join(tokens[i : i + order]), config.hash_dim)
            counts[bucket] = counts.get(bucket, 0) + 1
    return counts


def featurize_matrix(examples: Sequence[Example], config: FeatureConfig) -> sp.csr_matrix:
    """CSR matrix of hashed n-gram counts, one row per example."""
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for ex in examples:
        vec = featurize(ex, config)
        for bucket in sorted(vec):
            indices.append(bucket)
            data.append(float(vec[bucket]))
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.array(data), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(examples), config.hash_dim),
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """Weight matrix + bias; immutable by convention once trained."""

    weights: np.ndarray  # [num_outputs, hash_dim]
    bias: np.ndarray  # [num_outputs]
    head: Literal["classification", "regression"]
    label_space: LabelSpace

    def __post_init__(self):
        expected = self.label_space.num_classes if self.head == "classification" else 1
        if self.weights.shape[0] != expected or self.bias.shape != (expected,):
            raise ValidationError(
                f"shape mismatch: weights {self.weights.shape}, bias {self.bias.shape}, "
                f"expected {expected} outputs"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise NumericError("non-finite model parameters")

    @property
    def num_outputs(self) -> int:
        return self.weights.shape[0]

    @property
    def hash_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.bias.copy(), self.head, self.label_space)

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "version": 1,
                "head": self.head,
                "label_space": self.label_space.to_json(),
                "num_outputs": int(self.num_outputs),
                "hash_dim": int(self.hash_dim),
                "dtype": "<f8",
            },
            sort_keys=True,
        ).encode("utf-8")
        w = np.ascontiguousarray(self.weights, dtype="<f8")
        b = np.ascontiguousarray(self.bias, dtype="<f8")
        return header + b"\n" + w.tobytes() + b.tobytes()

    @staticmethod
    def from_bytes(blob: bytes) -> "ModelParams":
        header_raw, _, payload = blob.partition(b"\n")
        header = json.loads(header_raw.decode("utf-8"))
        if header.get("version") != 1:
            raise ValidationError(f"unsupported snapshot version {header.get('version')!r}")
        c, d = header["num_outputs"], header["hash_dim"]
        w_bytes = c * d * 8
        weights = np.frombuffer(payload[:w_bytes], dtype="<f8").reshape(c, d).copy()
        bias = np.frombuffer(payload[w_bytes : w_bytes + c * 8], dtype="<f8").copy()
        return ModelParams(
            weights, bias, header["head"], LabelSpace.from_json(header["label_space"])
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def load(path: Union[str, Path]) -> "ModelParams":
        return ModelParams.from_bytes(Path(path).read_bytes())

    def params_hash(self) -> str:
        return hashlib.blake2b(self.to_bytes(), digest_size=16).hexdigest()


def init_params(
    label_space: LabelSpace,
    config: FeatureConfig,
    seed: int = 0,
    scheme: Literal["zeros", "random"] = "zeros",
    scale: float = 0.01,
) -> ModelParams:
    head = "classification" if label_space.kind == "categorical" else "regression"
    c = label_space.num_classes if head == "classification" else 1
    if scheme == "zeros":
        weights = np.zeros((c, config.hash_dim))
        bias = np.zeros(c)
    elif scheme == "random":
        rng = np.random.default_rng(seed)
        weights = rng.uniform(-scale, scale, size=(c, config.hash_dim))
        bias = rng.uniform(-scale, scale, size=c)
    else:
        raise ValidationError(f"unknown init scheme {scheme!r}")
    return ModelParams(weights, bias, head, label_space)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    probabilities: Optional[np.ndarray] = None
    argmax_label: Optional[str] = None
    confidence: Optional[float] = None
    value: Optional[float] = None


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba_matrix(params: ModelParams, x: sp.csr_matrix) -> np.ndarray:
    logits = x @ params.weights.T + params.bias
    return _softmax(logits)


def predict_values_matrix(params: ModelParams, x: sp.csr_matrix) -> np.ndarray:
    raw = (x @ params.weights.T + params.bias)[:, 0]
    space = params.label_space
    return np.clip(raw, space.lo, space.hi)


def predict(params: ModelParams, example: Example, config: FeatureConfig) -> Prediction:
    x = featurize_matrix([example], config)
    if params.head == "classification":
        probs = predict_proba_matrix(params, x)[0]
        idx = int(np.argmax(probs))  # ties break toward the lowest class index
        return Prediction(
            probabilities=probs,
            argmax_label=params.label_space.classes[idx],
            confidence=float(probs[idx]),
        )
    return Prediction(value=float(predict_values_matrix(params, x)[0]))


# ---------------------------------------------------------------------------
# Loss & gradients
# ---------------------------------------------------------------------------


def loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    x: sp.csr_matrix,
    y: np.ndarray,
    l2: float,
    head: Literal["classification", "regression"] = "classification",
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss over the batch plus L2 on the weights, and its gradient.

    Classification: cross-entropy with integer class targets.
    Regression: half squared error with float targets.
    """
    n = x.shape[0]
    logits = x @ weights.T + bias
    if head == "classification":
        probs = _softmax(logits)
        eps = 1e-12
        loss = -np.log(probs[np.arange(n), y] + eps).mean()
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
    else:
        resid = logits[:, 0] - y
        loss = 0.5 * float(resid @ resid) / n
        delta = (resid / n)[:, None]
    grad_w = np.asarray((x.T @ delta).T) + l2 * weights
    grad_b = delta.sum(axis=0)
    loss += 0.5 * l2 * float((weights * weights).sum())
    return float(loss), grad_w, grad_b


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _parse_metric(metric: str) -> tuple[str, Optional[str]]:
    if metric.startswith("f1:"):
        return "f1", metric[3:]
    if metric in ("accuracy", "spearman", "f1"):
        return metric, None
    raise ValidationError(f"unknown metric {metric!r}")


def score_predictions(
    predicted: Sequence, gold: Sequence, metric: str
) -> float:
    """Score aligned prediction/gold sequences with a named metric.

    ``metric`` is ``accuracy``, ``f1:<positive_class>``, or ``spearman``.
    """
    kind, positive = _parse_metric(metric)
    if len(gold) == 0:
        raise ValidationError("cannot compute a metric on an empty dataset")
    if kind == "accuracy":
        hits = sum(1 for p, g in zip(predicted, gold) if p == g)
        return hits / len(gold)
    if kind == "f1":
        if positive is None:
            raise ValidationError("f1 requires a positive class, e.g. 'f1:pos'")
        tp = sum(1 for p, g in zip(predicted, gold) if p == positive and g == positive)
        fp = sum(1 for p, g in zip(predicted, gold) if p == positive and g != positive)
        fn = sum(1 for p, g in zip(predicted, gold) if p != positive and g == positive)
        if tp == 0:
            return 0.0
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        return 2 * precision * recall / (precision + recall)
    # spearman
    p = np.asarray(predicted, dtype=float)
    g = np.asarray(gold, dtype=float)
    if np.ptp(p) == 0 or np.ptp(g) == 0:
        return 0.0
    rho = spearmanr(p, g).statistic
    return float(rho)


def _metric_on_matrix(
    params: ModelParams, x: sp.csr_matrix, gold_labels: Sequence, metric: str
) -> float:
    kind, _ = _parse_metric(metric)
    if params.head == "regression":
        if kind in ("accuracy", "f1"):
            raise ValidationError(f"metric {metric!r} is not defined for a regression head")
        return score_predictions(predict_values_matrix(params, x), gold_labels, metric)
    probs = predict_proba_matrix(params, x)
    classes = params.label_space.classes
    preds = [classes[i] for i in np.argmax(probs, axis=1)]
    if kind == "spearman":
        raise ValidationError("spearman is not defined for a classification head")
    return score_predictions(preds, gold_labels, metric)


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    metric: str,
    config: FeatureConfig,
) -> float:
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    x = featurize_matrix(dataset.examples, config)
    gold = [ex.label for ex in dataset.examples]
    if any(g is None for g in gold):
        raise ValidationError("evaluate requires a fully labeled dataset")
    return _metric_on_matrix(params, x, gold, metric)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EarlyStop:
    patience: int = 5
    eval_every: int = 20


@dataclass(frozen=True)
class FixedSteps:
    total: int = 512
    checkpoint_every: int = 30
    average_last: int = 5

    def __post_init__(self):
        if self.average_last > self.total // self.checkpoint_every:
            raise ValidationError("average_last exceeds the number of checkpoints")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    max_steps: int = 300
    l2: float = 1e-4
    seed: int = 0
    lr_decay: float = 0.0
    stopping: Union[EarlyStop, FixedSteps] = field(default_factory=EarlyStop)


def average_checkpoints(snapshots: Sequence[ModelParams]) -> ModelParams:
    """Element-wise arithmetic mean of parameter snapshots."""
    if not snapshots:
        raise ValidationError("average_checkpoints needs at least one snapshot")
    first = snapshots[0]
    for s in snapshots[1:]:
        if s.weights.shape != first.weights.shape or s.head != first.head:
            raise ValidationError("checkpoint shape/head mismatch")
    weights = np.mean([s.weights for s in snapshots], axis=0)
    bias = np.mean([s.bias for s in snapshots], axis=0)
    return ModelParams(weights, bias, first.head, first.label_space)


def _encode_targets(params: ModelParams, labels: Sequence) -> np.ndarray:
    if params.head == "classification":
        classes = params.label_space.classes
        return np.array([classes.index(l) for l in labels], dtype=np.int64)
    return np.array([float(l) for l in labels])


def fit(
    init: ModelParams,
    x: sp.csr_matrix,
    labels: Sequence,
    config: TrainConfig,
    dev: Optional[tuple[sp.csr_matrix, Sequence]] = None,
    metric: str = "accuracy",
) -> tuple[ModelParams, list[dict]]:
    """Mini-batch SGD on a precomputed feature matrix.

    Early stopping keeps the checkpoint with the best dev metric (ties go to
    the earliest); fixed-step training averages the last snapshots taken at
    the configured interval. Returns the trained params and a trace of
    per-evaluation records.
    """
    if x.shape[0] == 0:
        raise ValidationError("training set must be nonempty")
    early = isinstance(config.stopping, EarlyStop)
    if early and dev is None:
        raise ValidationError("early stopping requires a dev set")

    y = _encode_targets(init, labels)
    rng = np.random.default_rng(config.seed)
    n = x.shape[0]
    weights = init.weights.copy()
    bias = init.bias.copy()
    trace: list[dict] = []

    def snapshot() -> ModelParams:
        return ModelParams(weights.copy(), bias.copy(), init.head, init.label_space)

    def dev_score(p: ModelParams) -> float:
        xd, yd = dev
        return _metric_on_matrix(p, xd, yd, metric)

    best: Optional[ModelParams] = None
    best_score = -np.inf
    evals_since_best = 0

    if early:
        best = snapshot()
        best_score = dev_score(best)
        trace.append({"step": 0, "loss": None, "dev_metric": best_score})

    checkpoints: list[ModelParams] = []
    total = config.stopping.total if isinstance(config.stopping, FixedSteps) else config.max_steps

    order = rng.permutation(n)
    cursor = 0
    for step in range(1, total + 1):
        if cursor >= n:
            order = rng.permutation(n)
            cursor = 0
        batch = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        loss, grad_w, grad_b = loss_and_grad(
            weights, bias, x[batch], y[batch], config.l2, init.head
        )
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        lr = config.learning_rate / (1.0 + config.lr_decay * (step - 1))
        weights -= lr * grad_w
        bias -= lr * grad_b

        if early:
            stop_cfg = config.stopping
            if step % stop_cfg.eval_every == 0 or step == total:
                current = snapshot()
                score = dev_score(current)
                trace.append({"step": step, "loss": loss, "dev_metric": score})
                if score > best_score:
                    best, best_score, evals_since_best = current, score, 0
                else:
                    evals_since_best += 1
                    if evals_since_best >= stop_cfg.patience:
                        break
        else:
            if step % config.stopping.checkpoint_every == 0:
                checkpoints.append(snapshot())
                trace.append({"step": step, "loss": loss, "dev_metric": None})

    if early:
        return best, trace
    if not checkpoints:
        return snapshot(), trace
    return average_checkpoints(checkpoints[-config.stopping.average_last :]), trace


def train(
    init: ModelParams,
    train_set: Dataset,
    config: TrainConfig,
    dev_set: Optional[Dataset] = None,
    feature_config: Optional[FeatureConfig] = None,
    metric: str = "accuracy",
) -> tuple[ModelParams, list[dict]]:
    """Dataset-level wrapper around :func:`fit`."""
    feature_config = feature_config or FeatureConfig()
    labels = [ex.label for ex in train_set.examples]
    if any(l is None for l in labels):
        raise ValidationError("train requires a fully labeled training set")
    x = featurize_matrix(train_set.examples, feature_config)
    dev = None
    if dev_set is not None and len(dev_set) > 0:
        dev = (
            featurize_matrix(dev_set.examples, feature_config),
            [ex.label for ex in dev_set.examples],
        )
    return fit(init, x, labels, config, dev=dev, metric=metric)
