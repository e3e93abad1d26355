import numpy as np
import pytest

from rra.backbone import BackboneConfig
from rra.data import SyntheticSpec, generate_synthetic
from rra.model import ModelConfig, RRAModel


def tiny_model(K=2, num_classes=3, dtype="float64", stages=((4, 3, 2),), input_size=8,
               backbone_bn=False, seed=0, **kw):
    cfg = ModelConfig(num_classes=num_classes, K=K, dtype=dtype,
                      backbone=BackboneConfig(stages=[tuple(s) for s in stages], input_size=input_size,
                                              with_batchnorm=backbone_bn), **kw)
    return RRAModel(cfg, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(num_classes=3, frames_per_video=8, train_per_class=6, test_per_class=3, seed=5)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def toy_dataset():
    return generate_synthetic(SyntheticSpec())
