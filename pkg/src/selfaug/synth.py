"""Deterministic synthetic benchmark corpora.

Three families are shipped:

* ``keyword-sentiment`` — two-class sentences built from class-indicative
  keyword sets embedded in a shared noise vocabulary, with an optional
  class-flip noise rate.
* ``pair-overlap-nli`` — three-class premise/hypothesis pairs built by token
  subsetting (entail), negation insertion / antonym swap (contradict), and
  appending unsupported filler clauses (neutral).
* ``drifted-cluster`` — a majority subpopulation with clean keyword signal
  plus a minority subpopulation whose surface keywords mimic the opposite
  class, distinguishable only by a marker token.

All samplers are pure functions of (spec, size, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

from .corpus import CorpusError, Dataset, Example, LabelSpace

NLI_CLASSES = ("entailment", "neutral", "contradiction")

POSITIVE_WORDS = (
    "good", "great", "excellent", "wonderful", "superb", "delightful",
    "charming", "enjoyable", "brilliant", "moving", "fresh", "engaging",
)
NEGATIVE_WORDS = (
    "bad", "awful", "terrible", "dreadful", "boring", "tedious",
    "bland", "painful", "clumsy", "lifeless", "stale", "tiresome",
)

# Antonyms are index-paired across the two keyword lists.
ANTONYM_TABLE: dict[str, str] = {}
for _p, _n in zip(POSITIVE_WORDS, NEGATIVE_WORDS):
    ANTONYM_TABLE[_p] = _n
    ANTONYM_TABLE[_n] = _p

SYNONYM_TABLE: dict[str, str] = {
    "good": "great", "great": "good", "excellent": "superb", "superb": "excellent",
    "wonderful": "delightful", "delightful": "wonderful",
    "bad": "awful", "awful": "bad", "terrible": "dreadful", "dreadful": "terrible",
    "boring": "tedious", "tedious": "boring",
    "movie": "film", "film": "movie", "story": "plot", "plot": "story",
    "actor": "performer", "performer": "actor",
}

NOISE_WORDS = (
    "the", "a", "this", "that", "movie", "film", "story", "plot", "actor",
    "scene", "script", "director", "cast", "music", "ending", "character",
    "dialogue", "pace", "style", "camera", "moment", "performance", "screen",
    "theme", "tone", "drama", "comedy", "thriller", "audience", "review",
)

# Appears only in neutral hypotheses; never in premises.
FILLER_WORDS = (
    "reportedly", "allegedly", "yesterday", "overseas", "backstage",
    "offscreen", "supposedly", "elsewhere", "meanwhile", "apparently",
)

DRIFT_MARKER = "ironically"


@dataclass(frozen=True)
class SynthSpec:
    """Descriptor for one synthetic-task family."""

    family: str
    name: Optional[str] = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def param(self, key: str, default):
        return self.params.get(key, default)


def _sentence(rng: np.random.Generator, words, lo: int, hi: int) -> list[str]:
    n = int(rng.integers(lo, hi + 1))
    return [words[i] for i in rng.integers(0, len(words), size=n)]


def _gen_keyword_sentiment(spec: SynthSpec, size: int, seed: int, name: str) -> Dataset:
    noise_rate = float(spec.param("noise_rate", 0.0))
    keywords_per = int(spec.param("keywords_per_example", 3))
    rng = np.random.default_rng(seed)
    space = LabelSpace.categorical(("pos", "neg"))
    examples = []
    for i in range(size):
        label = "pos" if rng.random() < 0.5 else "neg"
        surface = label
        if noise_rate and rng.random() < noise_rate:
            surface = "neg" if label == "pos" else "pos"
        words = _sentence(rng, NOISE_WORDS, 6, 12)
        pool = POSITIVE_WORDS if surface == "pos" else NEGATIVE_WORDS
        for _ in range(keywords_per):
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, pool[int(rng.integers(0, len(pool)))])
        examples.append(Example(id=f"{name}:{i}", segment_a=" ".join(words), label=label))
    return Dataset(name=name, label_space=space, examples=tuple(examples))


def make_premise(rng: np.random.Generator) -> list[str]:
    """A premise sentence over the noise + sentiment vocabulary."""
    words = _sentence(rng, NOISE_WORDS, 5, 9)
    sentiment = POSITIVE_WORDS + NEGATIVE_WORDS
    pos = int(rng.integers(0, len(words) + 1))
    words.insert(pos, sentiment[int(rng.integers(0, len(sentiment)))])
    return words


def entail_transform(words: list[str], rng: np.random.Generator) -> list[str]:
    """Token subset with occasional synonym substitution."""
    kept = [w for w in words if rng.random() < 0.7]
    if len(kept) < 2:
        kept = words[: max(2, len(words) // 2)]
    return [
        SYNONYM_TABLE[w] if w in SYNONYM_TABLE and rng.random() < 0.2 else w
        for w in kept
    ]


def contradict_transform(words: list[str], rng: np.random.Generator) -> list[str]:
    """Antonym swap when possible, otherwise negation insertion."""
    out = list(words)
    swappable = [i for i, w in enumerate(out) if w in ANTONYM_TABLE]
    if swappable and rng.random() < 0.7:
        i = swappable[int(rng.integers(0, len(swappable)))]
        out[i] = ANTONYM_TABLE[out[i]]
    else:
        out.insert(min(1, len(out)), "not")
    return out


def neutral_transform(words: list[str], rng: np.random.Generator) -> list[str]:
    """Token subset plus a plausible-but-unsupported filler clause."""
    kept = [w for w in words if rng.random() < 0.7]
    if not kept:
        kept = words[:2]
    n_fill = int(rng.integers(2, 5))
    kept.extend(FILLER_WORDS[i] for i in rng.integers(0, len(FILLER_WORDS), size=n_fill))
    return kept


_NLI_TRANSFORMS = {
    "entailment": entail_transform,
    "contradiction": contradict_transform,
    "neutral": neutral_transform,
}


def _gen_pair_overlap_nli(spec: SynthSpec, size: int, seed: int, name: str) -> Dataset:
    rng = np.random.default_rng(seed)
    space = LabelSpace.categorical(NLI_CLASSES)
    examples = []
    for i in range(size):
        label = NLI_CLASSES[int(rng.integers(0, 3))]
        premise = make_premise(rng)
        hypothesis = _NLI_TRANSFORMS[label](premise, rng)
        examples.append(
            Example(
                id=f"{name}:{i}",
                segment_a=" ".join(premise),
                segment_b=" ".join(hypothesis),
                label=label,
            )
        )
    return Dataset(name=name, label_space=space, examples=tuple(examples))


def _gen_drifted_cluster(spec: SynthSpec, size: int, seed: int, name: str) -> Dataset:
    minority_fraction = float(spec.param("minority_fraction", 0.2))
    rng = np.random.default_rng(seed)
    space = LabelSpace.categorical(("pos", "neg"))
    examples = []
    for i in range(size):
        label = "pos" if rng.random() < 0.5 else "neg"
        words = _sentence(rng, NOISE_WORDS, 6, 12)
        minority = label == "neg" and rng.random() < minority_fraction
        # Minority negatives wear positive surface keywords; the marker token
        # is the only reliable signal of their true class.
        surface_pool = POSITIVE_WORDS if (label == "pos" or minority) else NEGATIVE_WORDS
        for _ in range(3):
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, surface_pool[int(rng.integers(0, len(surface_pool)))])
        if minority:
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, DRIFT_MARKER)
        examples.append(Example(id=f"{name}:{i}", segment_a=" ".join(words), label=label))
    return Dataset(name=name, label_space=space, examples=tuple(examples))


_FAMILIES = {
    "keyword-sentiment": _gen_keyword_sentiment,
    "pair-overlap-nli": _gen_pair_overlap_nli,
    "drifted-cluster": _gen_drifted_cluster,
}


class ConfigError(CorpusError):
    """An unknown family or invalid synthetic-task parameter."""


def synth_corpus(spec: SynthSpec, size: int, seed: int) -> Dataset:
    """Generate a deterministic synthetic dataset for one shipped family."""
    if spec.family not in _FAMILIES:
        raise ConfigError(
            f"unknown synthetic family {spec.family!r}; known: {sorted(_FAMILIES)}"
        )
    name = spec.name or f"{spec.family}-{seed}"
    return _FAMILIES[spec.family](spec, size, seed, name)
