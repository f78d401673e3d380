import math

import numpy as np
import pytest

from infostylegan import latent as L
from infostylegan import losses
from infostylegan import models as M
from conftest import rel_err, tiny_config


def test_adversarial_value_examples():
    assert losses.adversarial_value([0.5], [0.5]) == pytest.approx(2 * math.log(0.5))
    # pairs (D(real), D(fake)) = (0.8, 0.3) and (0.6, 0.1)
    got = losses.adversarial_value([0.8, 0.6], [0.3, 0.1])
    assert got == pytest.approx(0.5 * ((math.log(0.7) + math.log(0.8)) + (math.log(0.9) + math.log(0.6))))
    assert got == pytest.approx(-0.5980, abs=1e-4)
    assert -1e-6 < losses.adversarial_value([1 - 1e-9], [1e-9]) < 0


def test_adversarial_value_rejects_probabilities_outside_unit_interval():
    with pytest.raises(ValueError, match="sigmoid"):
        losses.adversarial_value([1.2], [0.1])
    with pytest.raises(ValueError):
        losses.adversarial_value([0.5, 0.5], [0.5])


def test_logit_form_matches_probability_form(rng):
    models = M.init_models(tiny_config(), seed=0)
    fake = rng.uniform(0, 1, (4, 1, 32, 32))
    real = rng.uniform(0, 1, (4, 1, 32, 32))
    lf, _, _ = M.discriminate(models, fake)
    lr, _, _ = M.discriminate(models, real)
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    assert losses.adv_value_estimate(models, fake, real) == pytest.approx(
        losses.adversarial_value(sig(lr), sig(lf)), rel=1e-12)


def test_info_bound_examples():
    spec = L.LatentSpec(0, (L.FactorSpec.bernoulli(0.5),))
    c = np.array([[1.0], [0.0], [1.0]])
    # Q puts 0.9 on the true bit
    logits = np.where(np.eye(2)[c[:, 0].astype(int)] > 0, math.log(0.9), math.log(0.1))
    assert losses.info_lower_bound_estimate(L.QPosterior(spec, logits), c, spec) == pytest.approx(
        math.log(0.9) - math.log(0.5))
    assert losses.info_lower_bound_estimate(L.QPosterior(spec, np.zeros((3, 2))), c, spec) == pytest.approx(0.0)


def test_point_mass_posterior_reaches_prior_entropy():
    spec = L.LatentSpec.discrete_default()
    rng = np.random.default_rng(0)
    c = L.sample(spec, rng, 50).c
    cols = [np.where(np.eye(f.cardinality)[c[:, i].astype(int)] > 0, 0.0, -60.0) for i, f in enumerate(spec.factors)]
    est = losses.info_lower_bound_estimate(L.QPosterior(spec, np.concatenate(cols, 1)), c, spec)
    assert est == pytest.approx(spec.entropy(), abs=1e-12)


def _fd_on_coordinates(loss_fn, store, coords, h=1e-5):
    out = []
    for name, idx in coords:
        arr = store.params[name]
        old = arr[idx]
        arr[idx] = old + h
        fp = loss_fn()
        arr[idx] = old - h
        fm = loss_fn()
        arr[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def _coords(store, rng, per_param=6):
    out = []
    for name in store:
        flat = rng.choice(store[name].size, size=min(per_param, store[name].size), replace=False)
        out += [(name, np.unravel_index(i, store[name].shape)) for i in flat]
    return out


@pytest.fixture
def small_setup():
    models = M.init_models(tiny_config(), seed=2)
    real = np.random.default_rng(8).uniform(0, 1, (6, 1, 32, 32))
    config = losses.TrainingConfig(batch_size=2)
    return models, real, config


def test_generator_objective_gradient(small_setup):
    models, _, config = small_setup
    pick = np.random.default_rng(0)

    def loss():
        return losses.generator_step(models, config, np.random.default_rng(11))[2]

    grads = losses.generator_step(models, config, np.random.default_rng(11))[3]
    for store in (models.generator, models.q_head):
        coords = _coords(store, pick)
        analytic = np.array([grads[n][i] for n, i in coords])
        assert rel_err(analytic, _fd_on_coordinates(loss, store, coords)) < 1e-4


def test_discriminator_objective_gradient(small_setup):
    models, real, config = small_setup
    pick = np.random.default_rng(1)

    def loss():
        return losses.discriminator_step(models, config, real, np.random.default_rng(12))[1]

    grads = losses.discriminator_step(models, config, real, np.random.default_rng(12))[2]
    for store in (models.discriminator, models.q_head):
        coords = _coords(store, pick)
        analytic = np.array([grads[n][i] for n, i in coords])
        assert rel_err(analytic, _fd_on_coordinates(loss, store, coords)) < 1e-4


def test_beta_zero_leaves_q_head_untouched(small_setup):
    models, real, _ = small_setup
    before = {k: v.copy() for k, v in models.q_head.params.items()}
    losses.train(models, losses.TrainingConfig(beta=0.0, batch_size=2), real, steps=3)
    for k, v in before.items():
        np.testing.assert_array_equal(models.q_head[k], v)


def test_styles_disabled_bypasses_mapping():
    models = M.init_models(tiny_config(style_enabled=False), seed=0)
    grads = losses.generator_step(models, losses.TrainingConfig(batch_size=2), np.random.default_rng(0))[3]
    for name in models.generator.names("mapping."):
        np.testing.assert_array_equal(grads[name], 0.0)
    assert np.any(grads["synthesis.input.weight"] != 0)


def test_training_is_deterministic(small_setup):
    models, real, config = small_setup
    a = losses.train(models.copy(), config, real, steps=4)
    b = losses.train(models.copy(), config, real, steps=4)
    assert a.entries == b.entries
    assert a.linfo_sample_std == b.linfo_sample_std


def test_non_finite_parameters_raise_with_step(small_setup):
    models, real, config = small_setup
    models.discriminator.params["adv.bias"][:] = np.inf
    with pytest.raises(losses.TrainingError, match="step 0"):
        losses.train_step(models, config, real, np.random.default_rng(0), step=0)


def test_variant_names():
    spec, disc = L.LatentSpec.default(), L.LatentSpec.discrete_default()
    assert losses.variant_name(1.0, False, spec) == "InfoGAN"
    assert losses.variant_name(0.0, True, spec) == "StyleGAN"
    assert losses.variant_name(1.0, True, spec) == "InfoStyleGAN"
    assert losses.variant_name(1.0, True, disc) == "InfoStyleGAN-Discrete"
    with pytest.raises(ValueError):
        losses.TrainingConfig(beta=-1.0)


def test_loss_report_statistics_and_csv(tmp_path):
    rep = losses.LossReport()
    for s, x in enumerate([1.0, 3.0, 2.0, 6.0]):
        rep.append(losses.StepReport(s, -x, x, 0.0, 0.0), 0.5)
    np.testing.assert_allclose(rep.running_mean("linfo"), [1, 2, 2, 3])
    np.testing.assert_allclose(rep.moving_average("linfo", window=2), [1, 2, 2.5, 4])
    rep.write_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "step,v,linfo,d_loss,g_loss"
    assert len(lines) == 5


def test_bound_violation_detection():
    spec = L.LatentSpec(0, (L.FactorSpec.bernoulli(0.5),))
    rep = losses.LossReport()
    rep.append(losses.StepReport(0, 0, math.log(2) + 0.1, 0, 0), 0.0)
    rep.append(losses.StepReport(1, 0, 0.0, 0, 0), 0.0)
    np.testing.assert_array_equal(losses.bound_violations(rep, spec, 4), [0])
    with pytest.raises(ValueError):
        losses.bound_violations(rep, L.LatentSpec.default(), 4)
