import os
from collections import OrderedDict

import numpy as np
import pytest

from ditail import denoiser as dn
from ditail.numerics import Rng, derive_seed


def jittered_model(seed=0, config=None, scale=0.05, dtype=np.float32):
    """Freshly initialised model with every parameter perturbed.

    Initialisation zeroes the output projection, which would make the network
    branch vanish; the jitter gives each weight a generic value.
    """
    m = dn.DenoiserModel.init(config or dn.ModelConfig(), seed=seed)
    rng = Rng(derive_seed(seed, "jitter"))
    params = OrderedDict((k, (v + scale * rng.normal(v.shape, np.float64)).astype(dtype))
                         for k, v in m.params.items())
    return dn.DenoiserModel(m.config, params, m.vocab, dict(m.provenance))


@pytest.fixture(scope="session")
def model_a():
    return jittered_model(1)


@pytest.fixture(scope="session")
def model_b():
    return jittered_model(2)


@pytest.fixture(scope="session")
def small_config():
    return dn.ModelConfig(image_size=8, patch=4, width=16, layers=3, cond_dim=32, sample_steps=10)


@pytest.fixture(scope="session")
def zoo_dir():
    from ditail.zoo import default_cache_dir

    return os.environ.get("DITAIL_ZOO", default_cache_dir())


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
