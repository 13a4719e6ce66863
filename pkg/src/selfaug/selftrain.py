"""Self-training loops over a fixed unlabeled pool.

Broad mode re-annotates the entire pool every iteration and trains each
student from the base model on labeled + all pseudo-labeled examples. The
confidence-filtering baseline instead moves a fixed-size batch of the most
confident pseudo-labels permanently into the labeled set each iteration until
the pool is exhausted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import Dataset, Example, Label, UnlabeledPool, ValidationError
from .textmodel import (
    FeatureConfig,
    ModelParams,
    TrainConfig,
    _metric_on_matrix,
    featurize_matrix,
    fit,
    predict_proba_matrix,
    predict_values_matrix,
)


class SelfTrainError(Exception):
    pass


class UnsupportedModeError(SelfTrainError):
    pass


@dataclass(frozen=True)
class PseudoLabeledSet:
    """Teacher-assigned labels for pool examples, in pool order."""

    entries: tuple[tuple[str, Label, Optional[float]], ...]
    produced_by_iteration: int = 0

    def labels(self) -> list[Label]:
        return [e[1] for e in self.entries]

    def confidences(self) -> list[Optional[float]]:
        return [e[2] for e in self.entries]

    def ids(self) -> list[str]:
        return [e[0] for e in self.entries]


@dataclass(frozen=True)
class SelfTrainConfig:
    max_iterations: int = 30
    agreement_threshold: float = 0.999
    agreement_patience: int = 2
    dev_patience: Optional[int] = None
    final_finetune_on_l: Literal["on", "off", "auto_by_dev"] = "auto_by_dev"
    drop_lowest_confidence_fraction: float = 0.0
    mode: Literal["broad", "confidence_filtering"] = "broad"
    cf_batch: int = 32

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not (0 <= self.drop_lowest_confidence_fraction < 1):
            raise ValidationError("drop fraction must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SelfTrainResult:
    final_model: ModelParams
    per_iteration: list[dict]
    converged_at: Optional[int]
    config: SelfTrainConfig
    f0_hash: str
    mode: str = "broad"

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "mode": self.mode,
            "config": self.config.to_json(),
            "f0_hash": self.f0_hash,
            "converged_at": self.converged_at,
            "per_iteration": self.per_iteration,
            "final_model_hash": self.final_model.params_hash(),
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def annotate_pool(
    teacher: ModelParams,
    pool: UnlabeledPool,
    feature_config: Optional[FeatureConfig] = None,
    iteration: int = 0,
) -> PseudoLabeledSet:
    """One prediction per pool example, in pool order."""
    feature_config = feature_config or FeatureConfig()
    x = featurize_matrix(pool.examples, feature_config)
    return _annotate_matrix(teacher, x, pool.ids(), iteration)


def _annotate_matrix(
    teacher: ModelParams, x: sp.csr_matrix, ids: Sequence[str], iteration: int
) -> PseudoLabeledSet:
    if x.shape[0] == 0:
        return PseudoLabeledSet(entries=(), produced_by_iteration=iteration)
    if teacher.head == "classification":
        probs = predict_proba_matrix(teacher, x)
        idx = np.argmax(probs, axis=1)
        classes = teacher.label_space.classes
        entries = tuple(
            (ids[i], classes[idx[i]], float(probs[i, idx[i]])) for i in range(len(ids))
        )
    else:
        values = predict_values_matrix(teacher, x)
        entries = tuple((ids[i], float(values[i]), None) for i in range(len(ids)))
    return PseudoLabeledSet(entries=entries, produced_by_iteration=iteration)


def _labeling_accuracy(
    pseudo: PseudoLabeledSet, gold: Optional[Mapping[str, Label]]
) -> Optional[float]:
    if gold is None or not pseudo.entries:
        return None
    hits = sum(1 for ex_id, label, _ in pseudo.entries if gold.get(ex_id) == label)
    return hits / len(pseudo.entries)


def _drop_lowest(pseudo: PseudoLabeledSet, fraction: float) -> list[int]:
    """Kept pool indices after removing the lowest-confidence fraction."""
    n = len(pseudo.entries)
    n_drop = int(fraction * n)
    if n_drop == 0:
        return list(range(n))
    conf = np.array([c for _, _, c in pseudo.entries])
    # Stable: equal confidences drop in pool order.
    dropped = set(np.argsort(conf, kind="stable")[:n_drop].tolist())
    return [i for i in range(n) if i not in dropped]


def self_train(
    f0: ModelParams,
    labeled: Dataset,
    pool: UnlabeledPool,
    dev: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    st_config: Optional[SelfTrainConfig] = None,
    train_config: Optional[TrainConfig] = None,
    seed: int = 0,
    feature_config: Optional[FeatureConfig] = None,
    metric: str = "accuracy",
    gold: Optional[Mapping[str, Label]] = None,
) -> SelfTrainResult:
    """Broad-distribution self-training from the base model ``f0``.

    Every iteration the current teacher re-annotates the whole pool, and a
    fresh student is trained from ``f0`` on labeled + pseudo-labeled data.
    Terminates on successive pseudo-label agreement (with patience) or at
    ``max_iterations``. ``gold`` (id -> gold label) enables the pool
    labeling-accuracy series.
    """
    st_config = st_config or SelfTrainConfig()
    train_config = train_config or TrainConfig(seed=seed)
    feature_config = feature_config or FeatureConfig()
    if st_config.mode == "confidence_filtering":
        return confidence_filter_selftrain(
            f0, labeled, pool, dev, test, st_config.cf_batch, train_config, seed,
            feature_config=feature_config, metric=metric, gold=gold,
            st_config=st_config,
        )
    if len(labeled) == 0 or len(pool) == 0:
        raise ValidationError("self_train requires nonempty labeled data and pool")
    needs_dev = st_config.final_finetune_on_l == "auto_by_dev" or st_config.dev_patience
    if needs_dev and (dev is None or len(dev) == 0):
        raise ValidationError(
            "a dev set is required for auto final fine-tuning or dev-metric patience"
        )
    if f0.head == "regression" and st_config.drop_lowest_confidence_fraction > 0:
        raise ValidationError("confidence-based dropping is undefined for regression")

    x_l = featurize_matrix(labeled.examples, feature_config)
    y_l = [ex.label for ex in labeled.examples]
    x_pool = featurize_matrix(pool.examples, feature_config)
    pool_ids = pool.ids()
    dev_pack = None
    if dev is not None and len(dev) > 0:
        dev_pack = (featurize_matrix(dev.examples, feature_config), [e.label for e in dev.examples])
    test_pack = None
    if test is not None and len(test) > 0:
        test_pack = (featurize_matrix(test.examples, feature_config), [e.label for e in test.examples])

    f0_hash = f0.params_hash()

    teacher, _ = fit(f0.copy(), x_l, y_l, train_config, dev=dev_pack, metric=metric)

    finetune_on_l: Optional[bool] = {
        "on": True, "off": False, "auto_by_dev": None
    }[st_config.final_finetune_on_l]

    per_iteration: list[dict] = []
    prev_labels: Optional[list] = None
    consec_agreement = 0
    converged_at = None
    best_dev = -np.inf
    dev_stall = 0

    for t in range(1, st_config.max_iterations + 1):
        pseudo = _annotate_matrix(teacher, x_pool, pool_ids, iteration=t)
        labels_now = pseudo.labels()
        agreement = None
        if prev_labels is not None:
            agreement = sum(1 for a, b in zip(labels_now, prev_labels) if a == b) / len(labels_now)
        prev_labels = labels_now

        kept = _drop_lowest(pseudo, st_config.drop_lowest_confidence_fraction)
        x_train = sp.vstack([x_l, x_pool[kept]], format="csr")
        y_train = y_l + [labels_now[i] for i in kept]

        student_init = f0.copy()
        student_init_hash = student_init.params_hash()
        student, _ = fit(student_init, x_train, y_train, train_config, dev=dev_pack, metric=metric)

        if finetune_on_l is None:
            # Resolved once, at the first iteration, by dev comparison.
            with_ft, _ = fit(student.copy(), x_l, y_l, train_config, dev=dev_pack, metric=metric)
            score_plain = _metric_on_matrix(student, *dev_pack, metric)
            score_ft = _metric_on_matrix(with_ft, *dev_pack, metric)
            finetune_on_l = score_ft > score_plain
            if finetune_on_l:
                student = with_ft
        elif finetune_on_l:
            student, _ = fit(student.copy(), x_l, y_l, train_config, dev=dev_pack, metric=metric)

        record = {
            "iteration": t,
            "train_size": len(y_train),
            "pool_labeling_accuracy": _labeling_accuracy(pseudo, gold),
            "agreement": agreement,
            "student_init_hash": student_init_hash,
            "dev_metric": _metric_on_matrix(student, *dev_pack, metric) if dev_pack else None,
            "test_metric": _metric_on_matrix(student, *test_pack, metric) if test_pack else None,
        }
        per_iteration.append(record)
        teacher = student

        if agreement is not None and agreement >= st_config.agreement_threshold:
            consec_agreement += 1
        else:
            consec_agreement = 0
        if consec_agreement >= st_config.agreement_patience:
            converged_at = t
            break
        if st_config.dev_patience and dev_pack:
            score = record["dev_metric"]
            if score > best_dev:
                best_dev, dev_stall = score, 0
            else:
                dev_stall += 1
                if dev_stall >= st_config.dev_patience:
                    converged_at = t
                    break

    return SelfTrainResult(
        final_model=teacher,
        per_iteration=per_iteration,
        converged_at=converged_at,
        config=st_config,
        f0_hash=f0_hash,
        mode="broad",
    )


def confidence_filter_selftrain(
    f0: ModelParams,
    labeled: Dataset,
    pool: UnlabeledPool,
    dev: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    batch: int = 32,
    train_config: Optional[TrainConfig] = None,
    seed: int = 0,
    feature_config: Optional[FeatureConfig] = None,
    metric: str = "accuracy",
    gold: Optional[Mapping[str, Label]] = None,
    st_config: Optional[SelfTrainConfig] = None,
) -> SelfTrainResult:
    """Traditional confidence-filtering baseline.

    Each iteration the current teacher labels the remaining pool, the
    ``batch`` most confident examples move permanently into the labeled set
    with their pseudo-labels frozen, and a new student trains from ``f0``.
    Ends when the pool is exhausted.
    """
    if f0.head != "classification":
        raise UnsupportedModeError("confidence filtering requires a classification head")
    if batch < 1:
        raise ValidationError("batch must be >= 1")
    train_config = train_config or TrainConfig(seed=seed)
    feature_config = feature_config or FeatureConfig()
    st_config = st_config or SelfTrainConfig(mode="confidence_filtering", cf_batch=batch)

    x_l = featurize_matrix(labeled.examples, feature_config)
    y_l = [ex.label for ex in labeled.examples]
    x_pool = featurize_matrix(pool.examples, feature_config)
    pool_ids = pool.ids()
    dev_pack = None
    if dev is not None and len(dev) > 0:
        dev_pack = (featurize_matrix(dev.examples, feature_config), [e.label for e in dev.examples])
    test_pack = None
    if test is not None and len(test) > 0:
        test_pack = (featurize_matrix(test.examples, feature_config), [e.label for e in test.examples])

    f0_hash = f0.params_hash()
    teacher, _ = fit(f0.copy(), x_l, y_l, train_config, dev=dev_pack, metric=metric)
    classes = f0.label_space.classes

    remaining = list(range(len(pool_ids)))
    frozen_idx: list[int] = []
    frozen_labels: list[str] = []
    per_iteration: list[dict] = []
    t = 0
    while remaining:
        t += 1
        probs = predict_proba_matrix(teacher, x_pool[remaining])
        arg = np.argmax(probs, axis=1)
        conf = probs[np.arange(len(remaining)), arg]
        # Highest confidence first; ties break toward the lower pool index.
        ranked = sorted(range(len(remaining)), key=lambda i: (-conf[i], remaining[i]))
        chosen = ranked[:batch]
        added_idx = [remaining[i] for i in chosen]
        added_labels = [classes[arg[i]] for i in chosen]
        frozen_idx.extend(added_idx)
        frozen_labels.extend(added_labels)
        remaining = [i for i in remaining if i not in set(added_idx)]

        x_train = sp.vstack([x_l, x_pool[frozen_idx]], format="csr")
        y_train = y_l + frozen_labels
        student_init = f0.copy()
        student_init_hash = student_init.params_hash()
        student, _ = fit(student_init, x_train, y_train, train_config, dev=dev_pack, metric=metric)

        batch_accuracy = None
        pool_accuracy = None
        if gold is not None:
            hits = sum(
                1 for i, lab in zip(added_idx, added_labels) if gold.get(pool_ids[i]) == lab
            )
            batch_accuracy = hits / len(added_idx)
            full = _annotate_matrix(student, x_pool, pool_ids, iteration=t)
            pool_accuracy = _labeling_accuracy(full, gold)

        per_iteration.append(
            {
                "iteration": t,
                "train_size": len(y_train),
                "added": len(added_idx),
                "added_batch_accuracy": batch_accuracy,
                "pool_labeling_accuracy": pool_accuracy,
                "agreement": None,
                "student_init_hash": student_init_hash,
                "dev_metric": _metric_on_matrix(student, *dev_pack, metric) if dev_pack else None,
                "test_metric": _metric_on_matrix(student, *test_pack, metric) if test_pack else None,
            }
        )
        teacher = student

    return SelfTrainResult(
        final_model=teacher,
        per_iteration=per_iteration,
        converged_at=None,
        config=st_config,
        f0_hash=f0_hash,
        mode="confidence_filtering",
    )


def mix_pools(
    in_domain: UnlabeledPool,
    out_of_domain: UnlabeledPool,
    mode: Literal["in_only", "out_only", "in_plus_out"],
) -> UnlabeledPool:
    """Combine in-domain and out-of-domain pools for OOD experiments."""
    if mode == "in_only":
        return in_domain
    if mode == "out_only":
        return out_of_domain
    if mode != "in_plus_out":
        raise ValidationError(f"unknown pool mode {mode!r}")
    examples = tuple(
        Example(id=f"in:{ex.id}", segment_a=ex.segment_a, segment_b=ex.segment_b)
        for ex in in_domain.examples
    ) + tuple(
        Example(id=f"out:{ex.id}", segment_a=ex.segment_a, segment_b=ex.segment_b)
        for ex in out_of_domain.examples
    )
    return UnlabeledPool(
        source_name=f"{in_domain.source_name}+{out_of_domain.source_name}",
        examples=examples,
    )
