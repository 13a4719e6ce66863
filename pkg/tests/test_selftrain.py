"""Self-training loop tests: broad mode, confidence filtering, pool mixing."""

import json

import numpy as np
import pytest

from selfaug.corpus import (
    Dataset,
    Example,
    LabelSpace,
    UnlabeledPool,
    ValidationError,
    sample_regime,
)
from selfaug.selftrain import (
    PseudoLabeledSet,
    SelfTrainConfig,
    UnsupportedModeError,
    _drop_lowest,
    annotate_pool,
    confidence_filter_selftrain,
    mix_pools,
    self_train,
)
from selfaug.synth import SynthSpec, synth_corpus
from selfaug.textmodel import FeatureConfig, FixedSteps, TrainConfig, init_params

FC = FeatureConfig(hash_dim=2 ** 14)


def _setup(corpus_size=320, seed=0, k=8):
    corpus = synth_corpus(SynthSpec("keyword-sentiment"), corpus_size, 1)
    test = synth_corpus(SynthSpec("keyword-sentiment", name="ks-test"), 80, 42)
    split = sample_regime(corpus, "few_shot", k=k, seed=seed, test=test)
    f0 = init_params(corpus.label_space, FC)
    return corpus, split, f0


class TestAnnotatePool:
    def test_covers_pool_in_order(self):
        _, split, f0 = _setup()
        pseudo = annotate_pool(f0, split.pool, FC, iteration=3)
        assert pseudo.ids() == list(split.pool.ids())
        assert pseudo.produced_by_iteration == 3
        assert all(c is not None for c in pseudo.confidences())

    def test_empty_pool(self):
        space = LabelSpace.categorical(("pos", "neg"))
        pseudo = annotate_pool(init_params(space, FC), UnlabeledPool("empty", ()), FC)
        assert pseudo.entries == ()


class TestDropLowest:
    def test_zero_fraction_keeps_all(self):
        pseudo = PseudoLabeledSet(entries=(("a", "pos", 0.9), ("b", "neg", 0.6)))
        assert _drop_lowest(pseudo, 0.0) == [0, 1]

    def test_drops_lowest_confidence(self):
        pseudo = PseudoLabeledSet(
            entries=(("a", "pos", 0.9), ("b", "neg", 0.5), ("c", "pos", 0.7), ("d", "neg", 0.6))
        )
        assert _drop_lowest(pseudo, 0.5) == [0, 2]

    def test_ties_drop_in_pool_order(self):
        pseudo = PseudoLabeledSet(
            entries=(("a", "pos", 0.5), ("b", "neg", 0.5), ("c", "pos", 0.5), ("d", "neg", 0.9))
        )
        assert _drop_lowest(pseudo, 0.25) == [1, 2, 3]


class TestBroadSelfTrain:
    def test_invariants_and_result_shape(self):
        corpus, split, f0 = _setup()
        gold = corpus.labels_by_id()
        result = self_train(
            f0, split.train, split.pool, dev=split.dev, test=split.test,
            st_config=SelfTrainConfig(max_iterations=4),
            train_config=TrainConfig(seed=0), feature_config=FC, gold=gold,
        )
        f0_hash = f0.params_hash()
        assert result.f0_hash == f0_hash
        assert result.mode == "broad"
        expected = len(split.train) + len(split.pool)
        for rec in result.per_iteration:
            assert rec["train_size"] == expected
            assert rec["student_init_hash"] == f0_hash
            assert 0.0 <= rec["pool_labeling_accuracy"] <= 1.0

    def test_convergence_counts_from_first_agreement(self):
        """Stable labels from iteration 1 with patience 1 converge at t=2."""
        corpus, split, f0 = _setup()
        result = self_train(
            f0, split.train, split.pool, dev=split.dev,
            st_config=SelfTrainConfig(
                agreement_threshold=1.0, agreement_patience=1, max_iterations=10,
                final_finetune_on_l="off",
            ),
            train_config=TrainConfig(seed=0), feature_config=FC,
        )
        assert [rec["agreement"] for rec in result.per_iteration] == [None, 1.0]
        assert result.converged_at == 2

    def test_determinism(self):
        corpus, split, f0 = _setup()
        kwargs = dict(
            dev=split.dev,
            st_config=SelfTrainConfig(max_iterations=3),
            train_config=TrainConfig(seed=5), feature_config=FC,
        )
        a = self_train(f0, split.train, split.pool, **kwargs)
        b = self_train(f0, split.train, split.pool, **kwargs)
        assert a.final_model.to_bytes() == b.final_model.to_bytes()
        assert a.to_json_str() == b.to_json_str()

    def test_requires_labeled_and_pool(self):
        corpus, split, f0 = _setup()
        empty_pool = UnlabeledPool("empty", ())
        with pytest.raises(ValidationError):
            self_train(f0, split.train, empty_pool, dev=split.dev, feature_config=FC)

    def test_auto_finetune_needs_dev(self):
        corpus, split, f0 = _setup()
        with pytest.raises(ValidationError):
            self_train(
                f0, split.train, split.pool, dev=None,
                st_config=SelfTrainConfig(final_finetune_on_l="auto_by_dev"),
                train_config=TrainConfig(seed=0, stopping=FixedSteps(30, 30, 1)),
                feature_config=FC,
            )

    def test_drop_fraction_shrinks_train_size(self):
        corpus, split, f0 = _setup()
        result = self_train(
            f0, split.train, split.pool, dev=split.dev,
            st_config=SelfTrainConfig(
                max_iterations=2, drop_lowest_confidence_fraction=0.25,
                final_finetune_on_l="off",
            ),
            train_config=TrainConfig(seed=0), feature_config=FC,
        )
        n_pool = len(split.pool)
        kept = n_pool - int(0.25 * n_pool)
        for rec in result.per_iteration:
            assert rec["train_size"] == len(split.train) + kept

    def test_json_payload(self):
        corpus, split, f0 = _setup()
        result = self_train(
            f0, split.train, split.pool, dev=split.dev,
            st_config=SelfTrainConfig(max_iterations=2),
            train_config=TrainConfig(seed=0), feature_config=FC,
        )
        payload = json.loads(result.to_json_str())
        assert payload["schema_version"] == 1
        assert payload["final_model_hash"] == result.final_model.params_hash()
        assert len(payload["per_iteration"]) == len(result.per_iteration)


class TestConfidenceFiltering:
    def test_pool_exhaustion_and_batch_sizes(self):
        corpus, split, f0 = _setup(corpus_size=320)
        gold = corpus.labels_by_id()
        batch = 32
        result = confidence_filter_selftrain(
            f0, split.train, split.pool, dev=split.dev, batch=batch,
            train_config=TrainConfig(seed=0), feature_config=FC, gold=gold,
        )
        n_pool = len(split.pool)
        added = [rec["added"] for rec in result.per_iteration]
        assert sum(added) == n_pool
        assert all(a == batch for a in added[:-1])
        assert added[-1] <= batch
        assert result.mode == "confidence_filtering"
        # The labeled set grows monotonically by exactly the added batch.
        sizes = [rec["train_size"] for rec in result.per_iteration]
        assert sizes[0] == len(split.train) + added[0]
        for prev, cur, a in zip(sizes, sizes[1:], added[1:]):
            assert cur == prev + a

    def test_students_restart_from_f0(self):
        corpus, split, f0 = _setup(corpus_size=280)
        result = confidence_filter_selftrain(
            f0, split.train, split.pool, dev=split.dev, batch=64,
            train_config=TrainConfig(seed=0), feature_config=FC,
        )
        f0_hash = f0.params_hash()
        assert all(rec["student_init_hash"] == f0_hash for rec in result.per_iteration)

    def test_dispatch_through_self_train(self):
        corpus, split, f0 = _setup(corpus_size=280)
        via_mode = self_train(
            f0, split.train, split.pool, dev=split.dev,
            st_config=SelfTrainConfig(mode="confidence_filtering", cf_batch=64),
            train_config=TrainConfig(seed=0), feature_config=FC,
        )
        direct = confidence_filter_selftrain(
            f0, split.train, split.pool, dev=split.dev, batch=64,
            train_config=TrainConfig(seed=0), feature_config=FC,
        )
        assert via_mode.final_model.to_bytes() == direct.final_model.to_bytes()

    def test_regression_head_unsupported(self):
        space = LabelSpace.continuous(0, 1)
        f0 = init_params(space, FC)
        ds = Dataset("r", space, (Example(id="r:0", segment_a="x", label=0.5),))
        pool = UnlabeledPool("p", (Example(id="p:0", segment_a="y"),))
        with pytest.raises(UnsupportedModeError):
            confidence_filter_selftrain(f0, ds, pool, feature_config=FC)

    def test_bad_batch_rejected(self):
        corpus, split, f0 = _setup(corpus_size=280)
        with pytest.raises(ValidationError):
            confidence_filter_selftrain(
                f0, split.train, split.pool, dev=split.dev, batch=0, feature_config=FC
            )


class TestMixPools:
    def _pools(self):
        a = UnlabeledPool("a", (Example(id="x", segment_a="in text"),))
        b = UnlabeledPool("b", (Example(id="x", segment_a="out text"),))
        return a, b

    def test_in_only_and_out_only(self):
        a, b = self._pools()
        assert mix_pools(a, b, "in_only") is a
        assert mix_pools(a, b, "out_only") is b

    def test_in_plus_out_prefixes_ids(self):
        a, b = self._pools()
        mixed = mix_pools(a, b, "in_plus_out")
        assert mixed.ids() == ("in:x", "out:x")
        assert len(mixed) == 2

    def test_unknown_mode(self):
        a, b = self._pools()
        with pytest.raises(ValidationError):
            mix_pools(a, b, "shuffled")
