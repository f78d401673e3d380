import numpy as np
import pytest

from infostylegan import config as C
from infostylegan import latent as L


def test_defaults_and_variant():
    cfg = C.RunConfig()
    assert cfg.variant == "InfoStyleGAN"
    assert cfg.latent_spec().q_width == 13
    assert cfg.training().beta == 1.0
    assert cfg.replace(beta=0.0).variant == "StyleGAN"
    assert cfg.replace(beta=None).beta == 1.0


def test_parse_values_factors_and_comments():
    cfg = C.parse_config("""
        # discrete run
        steps = 100
        style_enabled = off
        gamma = 0.25
        factor = categorical:3
        factor = bernoulli:0.5   # trailing comment
    """)
    assert cfg.steps == 100 and cfg.style_enabled is False and cfg.gamma == 0.25
    assert cfg.factor == (L.FactorSpec.categorical(3), L.FactorSpec.bernoulli(0.5))
    assert C.parse_config("gamma = auto").gamma is None


@pytest.mark.parametrize("text, match", [
    ("stepz = 3", "unknown key 'stepz'"),
    ("steps = 1\nsteps = 2", "duplicate key 'steps'"),
    ("steps = many", "steps"),
    ("steps", "key = value"),
    ("nu = 2", "nu"),
    ("detector = svm", "detector"),
    ("factor = categorical:x", ":1:"),
    ("style_enabled = maybe", "true/false"),
])
def test_parse_errors(text, match):
    with pytest.raises(C.ConfigError, match=match):
        C.parse_config(text, "run.cfg")


def test_text_round_trip(tmp_path):
    cfg = C.RunConfig(steps=7, beta=0.5, gamma=None, factor=L.LatentSpec.discrete_default().factors)
    path = cfg.write(tmp_path)
    assert path.name == C.RESOLVED_NAME
    assert C.load_config(path) == cfg
    with pytest.raises(FileNotFoundError):
        C.load_config(tmp_path / "missing.cfg")


def test_split_rules_follow_outlier_shape():
    inl, out = C.RunConfig(outlier_shape="triangle").split_rules()
    f = np.array([[0], [1], [2]])
    assert list(inl(f)) == [True, True, False] and list(out(f)) == [False, False, True]
