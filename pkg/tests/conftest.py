import pytest

from selfaug.corpus import Dataset, Example, LabelSpace
from selfaug.textmodel import FeatureConfig, TrainConfig, init_params, train


@pytest.fixture(scope="session")
def small_fc():
    return FeatureConfig(hash_dim=2 ** 12)


@pytest.fixture(scope="session")
def binary_space():
    return LabelSpace.categorical(("pos", "neg"))


@pytest.fixture(scope="session")
def tiny_dataset(binary_space):
    rows = [
        ("good movie great plot", "pos"),
        ("excellent fresh acting", "pos"),
        ("wonderful engaging story", "pos"),
        ("delightful superb scene", "pos"),
        ("bad boring script", "neg"),
        ("awful terrible pacing", "neg"),
        ("tedious bland dialogue", "neg"),
        ("dreadful lifeless ending", "neg"),
    ]
    examples = tuple(
        Example(id=f"tiny:{i}", segment_a=text, label=label)
        for i, (text, label) in enumerate(rows)
    )
    return Dataset(name="tiny", label_space=binary_space, examples=examples)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset, small_fc):
    """A classifier trained to saturation on the tiny sentiment set."""
    from selfaug.textmodel import FixedSteps

    config = TrainConfig(max_steps=60, seed=0, stopping=FixedSteps(60, 60, 1))
    params, _ = train(
        init_params(tiny_dataset.label_space, small_fc),
        tiny_dataset,
        config,
        feature_config=small_fc,
    )
    return params
