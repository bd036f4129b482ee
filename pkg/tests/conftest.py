import numpy as np
import pytest

from spx.synth import SynthSpec, gen_calibration, gen_planted_model

ACCEPTANCE_SEED = 11


@pytest.fixture(scope="session")
def planted_run():
    """Default desk-scale planted model + calibration used across suites."""
    spec = SynthSpec(seed=ACCEPTANCE_SEED)
    model, planted = gen_planted_model(spec)
    x = gen_calibration(spec)
    return model, x, planted, spec


@pytest.fixture(scope="session")
def small_run():
    """A fast miniature synth run for pipeline and CLI tests."""
    spec = SynthSpec(
        seed=5, d=32, d_ff=64, depth=2, n_clusters_true=4,
        planted_count=4, samples=1024,
    )
    model, planted = gen_planted_model(spec)
    x = gen_calibration(spec)
    return model, x, planted, spec


def planted_mask(planted, n):
    mask = np.zeros(n, dtype=bool)
    mask[planted] = True
    return mask
