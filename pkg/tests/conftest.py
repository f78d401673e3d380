import numpy as np
import pytest

from infostylegan import latent as L
from infostylegan import models as M


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def tiny_spec() -> L.LatentSpec:
    return L.LatentSpec(3, (L.FactorSpec.bernoulli(0.5), L.FactorSpec.categorical(3), L.FactorSpec.uniform(-1, 1)))


def tiny_config(style_enabled: bool = True, spec=None) -> M.ModelConfig:
    return M.ModelConfig(spec=spec or tiny_spec(), style_enabled=style_enabled, mapping_layers=2, w_dim=5,
                         g_channels=(3, 2, 2, 2), d_channels=(2, 2, 3, 3), dense_width=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
