import numpy as np
import pytest

from cxrlab.diffusion import ToyBundleConfig, build_toy_bundle
from cxrlab.evalharness import make_synthetic_finetune_set


@pytest.fixture(scope="session")
def blob_set():
    return make_synthetic_finetune_set(seed=0)


@pytest.fixture()
def small_bundle(blob_set):
    """Compact bundle used by the training tests; prefit on the blob set."""
    cfg = ToyBundleConfig(cond_dim=64, latent_shape=(2, 4, 4))
    return build_toy_bundle(cfg,
                            prefit_images=blob_set.negatives
                            + blob_set.positives)
