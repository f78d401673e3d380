"""Adversarial value, the mutual-information lower bound and the alternating (D, G, Q) update.

The discriminator ascends V(D, G) = E log(1 - D(G(z))) + E log D(x); the
generator and Q head descend V_G - beta * L_info, where V_G is the
non-saturating surrogate -E log D(G(z)). Reported V values always use the
saturating form above. The Q head and the shared trunk also receive the
-beta * L_info gradient during the discriminator step.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import latent as L
from . import models as M
from . import tensor as T


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    beta: float = 1.0
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    instance_noise: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.instance_noise < 0:
            raise ValueError("instance_noise must be >= 0")


def variant_name(beta: float, style_enabled: bool, spec: L.LatentSpec) -> str:
    if style_enabled and beta > 0:
        return "InfoStyleGAN-Discrete" if spec.all_discrete else "InfoStyleGAN"
    if style_enabled:
        return "StyleGAN"
    return "InfoGAN" if beta > 0 else "GAN"


@dataclass
class StepReport:
    step: int
    v: float
    linfo: float
    d_loss: float
    g_loss: float


@dataclass
class LossReport:
    """Per-step estimates plus running means and the per-sample spread of L_info."""

    entries: List[StepReport] = field(default_factory=list)
    linfo_sample_std: List[float] = field(default_factory=list)

    def append(self, entry: StepReport, linfo_std: float = 0.0) -> None:
        self.entries.append(entry)
        self.linfo_sample_std.append(linfo_std)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.entries])

    def running_mean(self, name: str) -> np.ndarray:
        col = self.column(name)
        return np.cumsum(col) / np.arange(1, len(col) + 1)

    def moving_average(self, name: str, window: int = 20) -> np.ndarray:
        col = self.column(name)
        c = np.concatenate([[0.0], np.cumsum(col)])
        idx = np.arange(1, len(col) + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "v", "linfo", "d_loss", "g_loss"))
            for e in self.entries:
                w.writerow((e.step, repr(e.v), repr(e.linfo), repr(e.d_loss), repr(e.g_loss)))


def adversarial_value(d_real, d_fake) -> float:
    """Batch estimate (1/B) sum [log(1 - D(x_fake)) + log D(x_real)] from D probabilities."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    if d_real.size == 0 or d_real.shape != d_fake.shape:
        raise ValueError("real and fake batches must be non-empty and of equal size")
    for name, d in (("real", d_real), ("fake", d_fake)):
        if np.any(d <= 0) or np.any(d >= 1):
            raise ValueError(f"D({name}) outside (0, 1); is the sigmoid missing?")
    return float(np.mean(np.log1p(-d_fake) + np.log(d_real)))


def adv_value_estimate(models: M.Models, fake_images, real_images) -> float:
    lf, _, _ = M.discriminate(models, fake_images)
    lr, _, _ = M.discriminate(models, real_images)
    # logit form avoids rounding D to exactly 0 or 1
    if len(lf) == 0 or len(lf) != len(lr):
        raise ValueError("real and fake batches must be non-empty and of equal size")
    return float(np.mean(-np.logaddexp(0.0, lf) - np.logaddexp(0.0, -lr)))


def info_terms(posteriors: L.QPosterior, c, spec: L.LatentSpec) -> np.ndarray:
    """Per-sample log Q(c|x) - log p(c)."""
    return L.q_log_prob(posteriors, c) - L.log_prior(spec, c)


def info_lower_bound_estimate(posteriors: L.QPosterior, c, spec: L.LatentSpec) -> float:
    """(1/B) sum_l [log Q(c(l) | x(l)) - log p(c(l))]."""
    return float(np.mean(info_terms(posteriors, c, spec)))


def _info_graph(spec, q_out, c):
    return L.q_log_prob_graph(spec, q_out, c) - L.log_prior(spec, c)


def _sample_real(real_images: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return real_images[rng.integers(0, len(real_images), size=n)]


def discriminator_step(models: M.Models, config: TrainingConfig, real_images: np.ndarray,
                       rng: np.random.Generator):
    spec = models.config.spec
    b = config.batch_size
    real = _sample_real(real_images, b, rng)
    z = L.sample(spec, rng, b)
    fake = M.generate(models, z, noise_maps=M.make_noise_maps(b, rng))
    if config.instance_noise > 0:
        real = real + config.instance_noise * rng.standard_normal(real.shape)
        fake = fake + config.instance_noise * rng.standard_normal(fake.shape)

    g = T.Graph()
    dp = models.discriminator.bind(g)
    qp = models.q_head.bind(g)
    batch = g.constant(np.concatenate([real, fake]))
    logit, _, dense = M.discriminator_forward(models.config, dp, batch)
    l_real, l_fake = logit[:b], logit[b:]
    v = T.mean(T.log_sigmoid(l_real)) + T.mean(T.log_sigmoid(-l_fake))
    loss = -v
    if config.beta > 0:
        q_out = M.q_forward(qp, dense[b:])
        loss = loss - config.beta * T.mean(_info_graph(spec, q_out, z.c))
    grads = g.backward(loss).parameters()
    g.nodes.clear()  # drop the tape now rather than at the next cycle collection
    return float(v.data), float(loss.data), grads


def generator_step(models: M.Models, config: TrainingConfig, rng: np.random.Generator):
    spec = models.config.spec
    b = config.batch_size
    z = L.sample(spec, rng, b)
    maps = M.make_noise_maps(b, rng)
    g = T.Graph()
    gp = models.generator.bind(g)
    dp = models.discriminator.bind(g, trainable=False)
    qp = models.q_head.bind(g)
    fake = M.generator_forward(models.config, gp, g.constant(z.encoding), maps)
    if config.instance_noise > 0:
        fake = fake + config.instance_noise * rng.standard_normal(fake.shape)
    logit, _, dense = M.discriminator_forward(models.config, dp, fake)
    q_out = M.q_forward(qp, dense)
    per_sample = _info_graph(spec, q_out, z.c)
    linfo = T.mean(per_sample)
    g_adv = -T.mean(T.log_sigmoid(logit))
    loss = g_adv - config.beta * linfo
    grads = g.backward(loss).parameters()
    g.nodes.clear()
    return float(linfo.data), float(per_sample.data.std()), float(loss.data), grads


def train_step(models: M.Models, config: TrainingConfig, real_images: np.ndarray,
               rng: np.random.Generator, step: int = 0):
    """One D update then one G+Q update. Returns (StepReport, per-sample L_info std)."""
    opt = dict(lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    try:
        v, d_loss, dgrads = discriminator_step(models, config, real_images, rng)
        if not math.isfinite(d_loss):
            raise TrainingError(f"step {step}: non-finite discriminator loss")
        T.adam_step(models.discriminator, {k: dgrads[k] for k in models.discriminator}, **opt)
        T.adam_step(models.q_head, {k: dgrads[k] for k in models.q_head}, **opt)

        linfo, linfo_std, g_loss, ggrads = generator_step(models, config, rng)
        if not (math.isfinite(g_loss) and math.isfinite(linfo)):
            raise TrainingError(f"step {step}: non-finite generator loss")
        T.adam_step(models.generator, {k: ggrads[k] for k in models.generator}, **opt)
        T.adam_step(models.q_head, {k: ggrads[k] for k in models.q_head}, **opt)
    except FloatingPointError as exc:
        raise TrainingError(f"step {step}: {exc}") from exc
    return StepReport(step, v, linfo, d_loss, g_loss), linfo_std


def train(models: M.Models, config: TrainingConfig, real_images: np.ndarray,
          steps: Optional[int] = None, callback=None, report: Optional[LossReport] = None,
          rng: Optional[np.random.Generator] = None) -> LossReport:
    """Run ``steps`` alternating updates; ``callback(step, models, report)`` after each."""
    steps = config.steps if steps is None else steps
    rng = np.random.default_rng(config.seed) if rng is None else rng
    report = LossReport() if report is None else report
    start = len(report.entries)
    for s in range(start, start + steps):
        entry, spread = train_step(models, config, real_images, rng, s)
        report.append(entry, spread)
        if callback is not None:
            callback(s, models, report)
    return report


def bound_violations(report: LossReport, spec: L.LatentSpec, batch_size: int) -> np.ndarray:
    """Steps where the running mean of L_info exceeds H(C) + 3 * sigma / sqrt(B)."""
    if not spec.all_discrete:
        raise ValueError("the entropy bound applies to discrete-only latent specs")
    run = report.running_mean("linfo")
    sigma = np.array(report.linfo_sample_std)
    allowance = 3.0 * sigma / math.sqrt(batch_size)
    return np.flatnonzero(run > spec.entropy() + allowance)
