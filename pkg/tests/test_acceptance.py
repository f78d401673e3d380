"""Acceptance criteria 1-11. Each test prints one PASS/FAIL line.

Criteria 5 and 10 share two 2000-step training runs (several minutes each on
one core), built once per session.
"""
import filecmp
import math
import os
import subprocess
import sys
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from infostylegan import anomaly as A
from infostylegan import data as D
from infostylegan import latent as L
from infostylegan import lemma as Lm
from infostylegan import losses
from infostylegan import metrics as Me
from infostylegan import models as M
from infostylegan.config import RunConfig
from conftest import rel_err, tiny_config
from test_metrics import brute_force_pr
from test_tensor import OPS, check_op


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


# ---------------------------------------------------------------------------
# shared training runs


def _train(config: RunConfig, images):
    models = M.init_models(config.model_config(), seed=config.seed)
    t0 = time.perf_counter()
    report = losses.train(models, config.training(), images)
    return models, report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def discrete_run():
    config = RunConfig(factor=L.LatentSpec.discrete_default().factors, train_on="all")
    return (config, *_train(config, D.generate(config.dataset_size, config.data_seed).images))


@pytest.fixture(scope="session")
def default_run():
    config = RunConfig()
    ds = D.generate(config.dataset_size, config.data_seed)
    inl, out = config.split_rules()
    train, test, is_out = D.anomaly_split(ds, inl, out, seed=config.data_seed)
    models, report, seconds = _train(config, train.images)
    return config, models, report, seconds, (train, test, is_out)


# ---------------------------------------------------------------------------
# 1-3: exact information decomposition


def test_criterion_01_decomposition(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for prior, channel in Lm.random_channel_suite(50, seed=0, n_symbols=8, sizes=(2, 2)):
        rep = Lm.exact_information_report(prior, channel)
        worst = max(worst, abs(rep.mutual_info - rep.factor_mutual_info.sum() - rep.expected_tc))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-10 and seconds < 5.0
    verdict(1, ok, f"max |I - sum I_i - E[TC]| = {worst:.2e} over 50 channels, {seconds:.2f} s")
    assert worst < 1e-10
    assert seconds < 5.0


def test_criterion_02_gap_identity(verdict):
    worst = 0.0
    for prior, channel in Lm.random_channel_suite(50, seed=0, n_symbols=8, sizes=(2, 2)):
        rep = Lm.exact_information_report(prior, channel)
        l_opt = Lm.l_info_exact(prior, channel, Lm.optimal_mean_field_encoder(prior, channel))
        worst = max(worst, abs(rep.mutual_info - l_opt - rep.expected_tc))
    prior = Lm.FactoredPrior.uniform((2, 2))
    xor_gap = Lm.verify_lemma_identities(prior, Lm.xor_channel()).gap
    prod_gap = Lm.verify_lemma_identities(prior, Lm.product_channel(0.1)).gap
    xor_err, prod_err = abs(xor_gap - math.log(2)), abs(prod_gap)
    ok = worst < 1e-10 and xor_err <= 1e-12 and prod_err <= 1e-12
    verdict(2, ok, f"max |I - L_info - E[TC]| = {worst:.2e}; XOR gap err {xor_err:.1e}; product gap {prod_err:.1e}")
    assert worst < 1e-10
    assert xor_err <= 1e-12
    assert prod_err <= 1e-12


def test_criterion_03_limit_behaviour(verdict):
    pts = Lm.lemma_limit_experiment(n_points=11)
    tc = [p.expected_tc for p in pts]
    dev = max(abs(p.expected_tc - p.gap) for p in pts)
    mono = Lm.is_monotone(tc)
    ok = len(pts) == 11 and mono and dev <= 1e-10
    verdict(3, ok, f"11 points, E[TC] {tc[0]:.3g} -> {tc[-1]:.4f}, monotone={mono}, max |E[TC] - gap| = {dev:.1e}")
    assert len(pts) == 11 and mono
    assert dev <= 1e-10


# ---------------------------------------------------------------------------
# 4: autodiff


def test_criterion_04_autodiff(verdict):
    t0 = time.perf_counter()
    failed = []
    for name in sorted(OPS):
        build, make = OPS[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        try:
            for _ in range(20):
                check_op(build, make(rng), rng, tol=1e-5)
        except AssertionError:
            failed.append(name)

    from test_models import _generator_loss
    from infostylegan import tensor as T

    rng = np.random.default_rng(5)
    models = M.init_models(tiny_config(), seed=3)
    z = L.sample(models.config.spec, rng, 2)
    maps = M.make_noise_maps(2, rng)
    weights = rng.uniform(-1, 1, (2, 1, 32, 32))
    g = T.Graph()
    out = M.generator_forward(models.config, models.generator.bind(g), g.constant(z.encoding), maps)
    grads = g.backward(T.sum(out * weights)).parameters()
    analytic, numeric = [], []
    for name in models.generator:
        analytic.append(grads[name].ravel())
        numeric.append(T.numerical_gradient(
            lambda x, name=name: _generator_loss(models, z.encoding, maps, weights, [name], [x]),
            models.generator[name]).ravel())
    e2e = rel_err(np.concatenate(analytic), np.concatenate(numeric))
    seconds = time.perf_counter() - t0
    ok = not failed and e2e < 1e-4 and seconds < 60
    verdict(4, ok, f"{len(OPS)} ops x 20 instances, failures {failed or 'none'}; generator rel err {e2e:.1e}; "
                   f"{seconds:.1f} s")
    assert not failed
    assert e2e < 1e-4
    assert seconds < 60


# ---------------------------------------------------------------------------
# 5: entropy bound during discrete training


def test_criterion_05_bound_property(verdict, discrete_run):
    config, _, report, seconds = discrete_run
    spec = config.latent_spec()
    violations = losses.bound_violations(report, spec, config.batch_size)
    linfo = report.column("linfo")
    start, end = linfo[0], report.moving_average("linfo", window=20)[-1]
    target = start + 0.5 * abs(start)
    ok = len(report.entries) == 2000 and len(violations) == 0 and end >= target and seconds < 1800
    verdict(5, ok, f"H(C) = {spec.entropy():.4f}, max running mean {report.running_mean('linfo').max():.4f}, "
                   f"{len(violations)} violations; L_info step 0 {start:.4f} -> end (MA20) {end:.4f} "
                   f"(needs >= {target:.4f}); {seconds:.0f} s")
    assert len(report.entries) == 2000
    assert len(violations) == 0
    assert end >= target
    assert seconds < 1800


def test_criterion_05_default_spec_smoke(verdict, default_run):
    # 500 steps with the default spec: L_info above its step-0 moving average
    _, _, report, _, _ = default_run
    ma = report.moving_average("linfo", window=20)
    ok = ma[499] > ma[0]
    verdict(5, ok, f"default spec smoke: L_info MA20 step 0 {ma[0]:.4f} -> step 500 {ma[499]:.4f}")
    assert ma[499] > ma[0]


# ---------------------------------------------------------------------------
# 6-9: metrics


def test_criterion_06_fid(verdict):
    rng = np.random.default_rng(6)
    a = rng.normal(size=(8, 8))
    p = Me.GaussianStats(rng.normal(size=8), a @ a.T)
    self_fid = Me.fid(p, p)
    diag = Me.fid(Me.GaussianStats([0, 0], np.diag([4.0, 1.0])), Me.GaussianStats([0, 0], np.eye(2)))

    imgs = D.generate(2000, 0).images
    brighter = np.clip(imgs + 0.25, 0.0, 1.0)
    feats, feats_b = Me.desk_features(imgs), Me.desk_features(brighter)
    halves = Me.fid_from_features(feats.values[:1000], feats.values[1000:])
    shifted = Me.fid_from_features(feats, feats_b)
    ok = abs(self_fid) <= 1e-8 and abs(diag - 1.0) <= 1e-6 and halves < shifted
    verdict(6, ok, f"fid(p,p) = {self_fid:.1e}; diag case {diag:.10f}; desk-FID halves {halves:.4f} "
                   f"< shifted {shifted:.4f}")
    assert abs(self_fid) <= 1e-8
    assert abs(diag - 1.0) <= 1e-6
    assert halves < shifted


def test_criterion_07_precision_recall(verdict):
    x = np.random.default_rng(7).normal(size=(100, 5))
    same = Me.precision_recall(x, x, 3)
    far = Me.precision_recall(x, x + 100.0, 1)
    real, fake = np.array([[0.0], [1.0], [2.0]]), np.array([[0.5], [10.0]])
    hand = Me.precision_recall(real, fake, 1)
    brute = brute_force_pr(real, fake, 1)
    ok = same == (1.0, 1.0) and far == (0.0, 0.0) and hand == brute == (0.5, 1.0)
    verdict(7, ok, f"identical {same}; far clusters {far}; 1-D case {hand} vs brute force {brute}")
    assert same == (1.0, 1.0)
    assert far == (0.0, 0.0)
    assert hand == brute == (0.5, 1.0)


def _oracle_posterior(labels_k, card):
    """C0 copies the attribute as a point mass; C1 (bernoulli) and C2 (uniform) sit at the prior."""
    spec = L.LatentSpec(0, (L.FactorSpec.categorical(card), L.FactorSpec.bernoulli(0.5), L.FactorSpec.uniform()))
    n = len(labels_k)
    c0 = np.where(np.eye(card)[labels_k] > 0, 0.0, -60.0)
    c1 = np.zeros((n, 2))
    c2 = np.stack([np.zeros(n), np.full(n, math.log(1.0 / 3.0))], 1)
    return L.QPosterior(spec, np.concatenate([c0, c1, c2], 1))


def test_criterion_08_mig(verdict):
    rows, _ = D.full_grid()
    gaps, agree = [], True
    for k, card in enumerate(D.FACTOR_SIZES):
        post = _oracle_posterior(rows[:, k], card)
        r1 = Me.mig(rows[:, k:k + 1], post, mc_samples=20000, seed=1)
        r2 = Me.mig(rows[:, k:k + 1], post, mc_samples=20000, seed=2)
        gaps.append(r1.gaps[0])
        agree &= abs(r1.gaps[0] - r2.gaps[0]) <= 3 * math.hypot(r1.gap_se[0], r2.gap_se[0])
    spec = L.LatentSpec.default()
    const = Me.mig(rows, L.QPosterior(spec, np.zeros((len(rows), spec.q_width))), mc_samples=20000)
    ok = min(gaps) >= 0.9 and const.mig <= 0.02 and agree
    verdict(8, ok, f"oracle gaps min {min(gaps):.4f}; constant-posterior MIG {const.mig:.4f}; "
                   f"seeds agree within 3 SE: {agree}")
    assert min(gaps) >= 0.9
    assert const.mig <= 0.02
    assert agree


def test_criterion_09_auc_oracle(verdict):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(100):
        ni, no = rng.integers(1, 201, size=2)
        # coarse integer scores guarantee ties
        si, so = rng.integers(0, 20, ni).astype(float), rng.integers(0, 20, no).astype(float)
        brute = ((si[:, None] > so[None, :]).sum() + 0.5 * (si[:, None] == so[None, :]).sum()) / (ni * no)
        mismatches += A.rank_auc(si, so) != brute
    verdict(9, mismatches == 0, f"{100 - mismatches}/100 score sets match pairwise AUC exactly")
    assert mismatches == 0


# ---------------------------------------------------------------------------
# 10: anomaly detectors


def test_criterion_10_detectors(verdict, default_run):
    config, models, _, _, (train, test, is_out) = default_run
    aucs = {}
    for det in ("ocsvm", "lof"):
        res = A.run_pipeline(models, train.images, test.images, is_out, "dense", det, seed=config.seed)
        aucs[res.report.method] = res.report.auc
    blob = np.random.default_rng(10).normal(size=(500, 2))
    model = A.ocsvm_fit(blob, nu=0.5)
    frac = float((model.decision(blob) < 0).mean())
    ok = min(aucs.values()) >= 0.85 and frac <= 0.55
    verdict(10, ok, ", ".join(f"{m} AUC {v:.4f}" for m, v in aucs.items())
            + f"; OCSVM nu=0.5 negative fraction {frac:.3f}")
    assert set(aucs) == {"IDO", "IDL"}
    assert min(aucs.values()) >= 0.85
    assert frac <= 0.55


# ---------------------------------------------------------------------------
# 11: determinism


def _cli(*args, cwd):
    env = dict(os.environ, DLAB_THREADS="1")
    return subprocess.run([sys.executable, "-m", "infostylegan.cli", *args], cwd=cwd, env=env,
                          capture_output=True, text=True, check=True)


def _tree_identical(a: Path, b: Path):
    names = sorted(p.name for p in a.iterdir())
    if names != sorted(p.name for p in b.iterdir()):
        return False, names
    diff = [n for n in names if not filecmp.cmp(a / n, b / n, shallow=False)]
    return not diff, diff


def test_criterion_11_determinism(verdict, tmp_path):
    (tmp_path / "short.cfg").write_text("steps = 30\nbatch_size = 8\nsample_every = 10\ndataset_size = 300\n")
    results = {}
    for run in ("a", "b"):
        _cli("train", "--out", f"train_{run}", "--config", "short.cfg", "--seed", "3", cwd=tmp_path)
        _cli("verify-lemma", "--out", f"lemma_{run}", "--seed", "0", cwd=tmp_path)
    results["train"] = _tree_identical(tmp_path / "train_a", tmp_path / "train_b")
    results["verify-lemma"] = _tree_identical(tmp_path / "lemma_a", tmp_path / "lemma_b")
    ok = all(same for same, _ in results.values())
    verdict(11, ok, "; ".join(f"{cmd}: {'identical' if same else 'differs in ' + str(d)}"
                              for cmd, (same, d) in results.items()))
    assert results["train"][0], results["train"][1]
    assert results["verify-lemma"][0], results["verify-lemma"][1]
