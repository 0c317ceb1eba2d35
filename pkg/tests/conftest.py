import pytest

from faqsim.io import synthesize_gaussian_clusters
from faqsim.lut import build_lut
from faqsim.nn import train_fixture
from faqsim.numfmt import QuantSpec


@pytest.fixture(scope="session")
def lut8():
    return build_lut(QuantSpec(bitwidth=8))


@pytest.fixture(scope="session")
def lut4():
    return build_lut(QuantSpec(bitwidth=4))


@pytest.fixture(scope="session")
def cnn_bundle():
    """(train split, test split, trained smallcnn) on 10-class image data."""
    data = synthesize_gaussian_clusters(
        seed=7, classes=10, samples_per_class=200, shape=(1, 8, 8),
        mean_scale=1.0, noise=1.2,
    )
    train, test = data.split_at(1600)
    model = train_fixture(train, "smallcnn", epochs=30, learning_rate=0.05, seed=3)
    return train, test, model


@pytest.fixture(scope="session")
def mlp_bundle():
    """(train split, test split, trained mlp2) on harder 10-class flat data."""
    data = synthesize_gaussian_clusters(
        seed=11, classes=10, samples_per_class=200, shape=(64,),
        mean_scale=1.0, noise=2.0,
    )
    train, test = data.split_at(1600)
    model = train_fixture(train, "mlp2", epochs=30, learning_rate=0.05, seed=5)
    return train, test, model
