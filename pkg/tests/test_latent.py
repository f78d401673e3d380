import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infostylegan import latent as L
from infostylegan import tensor as T


def test_default_spec_widths():
    spec = L.LatentSpec.default()
    assert spec.encoding_width == 32 + 1 + 1 + 3 + 3
    # two logits per bernoulli, three categorical logits, (mu, logvar) per uniform
    assert spec.q_width == 2 * 2 + 3 + 3 * 2 == 13


def test_parse_and_format():
    assert L.FactorSpec.parse("bernoulli:0.5") == L.FactorSpec.bernoulli(0.5)
    assert L.FactorSpec.parse("categorical:3") == L.FactorSpec.categorical(3)
    assert L.FactorSpec.parse("uniform:-1:1") == L.FactorSpec.uniform(-1.0, 1.0)
    for bad in ("bernoulli:1.5", "categorical:1", "uniform:1:-1", "gauss:0", "categorical:x"):
        with pytest.raises(ValueError):
            L.FactorSpec.parse(bad)


factor_specs = st.one_of(
    st.floats(0.01, 0.99).map(L.FactorSpec.bernoulli),
    st.integers(2, 9).map(L.FactorSpec.categorical),
    st.tuples(st.floats(-5, 5), st.floats(0.1, 5)).map(lambda t: L.FactorSpec.uniform(t[0], t[0] + t[1])),
)


@settings(max_examples=60, deadline=None)
@given(factor_specs)
def test_format_round_trips(spec):
    assert L.FactorSpec.parse(spec.format()) == spec


def test_encoding_layout():
    spec = L.LatentSpec(2, (L.FactorSpec.bernoulli(), L.FactorSpec.categorical(3), L.FactorSpec.uniform()))
    enc = L.encode(spec, np.array([[0.1, 0.2]]), np.array([[0.0, 2.0, 0.3]]))
    np.testing.assert_array_equal(enc, [[0.1, 0.2, -1.0, 0.0, 0.0, 1.0, 0.3]])


def test_sample_respects_support(rng):
    spec = L.LatentSpec.default()
    s = L.sample(spec, rng, 500)
    assert s.z_prime.shape == (500, 32)
    assert set(np.unique(s.c[:, 0])) <= {0.0, 1.0}
    assert set(np.unique(s.c[:, 2])) == {0.0, 1.0, 2.0}
    assert np.all(np.abs(s.c[:, 3:]) <= 1.0)
    np.testing.assert_array_equal(s.encoding, L.encode(spec, s.z_prime, s.c))


def test_log_prior_values():
    spec = L.LatentSpec(0, (L.FactorSpec.bernoulli(0.25), L.FactorSpec.categorical(4), L.FactorSpec.uniform(0, 2)))
    lp = L.log_prior(spec, np.array([[1.0, 3.0, 0.5], [0.0, 0.0, 2.0]]))
    np.testing.assert_allclose(lp, [math.log(0.25 * 0.25 / 2), math.log(0.75 * 0.25 / 2)])
    with pytest.raises(ValueError):
        L.log_prior(spec, np.array([[2.0, 0.0, 0.5]]))
    with pytest.raises(ValueError):
        L.log_prior(spec, np.array([[0.0, 0.0, 2.5]]))


def test_entropy():
    assert L.LatentSpec.discrete_default().entropy() == pytest.approx(2 * math.log(2) + math.log(3))
    assert L.FactorSpec.uniform(-1, 1).entropy() == pytest.approx(math.log(2))


def test_q_log_prob_matches_graph_version(rng):
    spec = L.LatentSpec.default()
    params = rng.normal(size=(6, spec.q_width))
    c = L.sample(spec, rng, 6).c
    numpy_version = L.q_log_prob(L.QPosterior(spec, params), c)
    g = T.Graph()
    graph_version = L.q_log_prob_graph(spec, g.constant(params), c).data
    np.testing.assert_allclose(numpy_version, graph_version, rtol=1e-12)


def test_q_log_prob_hand_values():
    spec = L.LatentSpec(0, (L.FactorSpec.categorical(2), L.FactorSpec.uniform()))
    params = np.array([[0.0, math.log(3.0), 0.5, 0.0]])
    got = L.q_log_prob(L.QPosterior(spec, params), np.array([[1.0, 0.5]]))[0]
    assert got == pytest.approx(math.log(0.75) - 0.5 * math.log(2 * math.pi))


def test_q_posterior_checks_width():
    with pytest.raises(T.ShapeError):
        L.QPosterior(L.LatentSpec.default(), np.zeros((2, 12)))


def test_sweep_values():
    np.testing.assert_array_equal(L.sweep_values(L.FactorSpec.categorical(3)), [0, 1, 2])
    np.testing.assert_allclose(L.sweep_values(L.FactorSpec.uniform(-1, 1)), np.linspace(-1, 1, 7))
