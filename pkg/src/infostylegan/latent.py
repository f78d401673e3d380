"""Latent code Z = (Z', C): factor priors, sampling, encodings and posterior log-probabilities."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import tensor as T

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FactorSpec:
    kind: str  # bernoulli | categorical | uniform
    p: float = 0.5
    k: int = 2
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind == "bernoulli":
            if not 0.0 < self.p < 1.0:
                raise ValueError(f"bernoulli p must lie in (0,1), got {self.p}")
        elif self.kind == "categorical":
            if self.k < 2:
                raise ValueError(f"categorical needs k >= 2, got {self.k}")
        elif self.kind == "uniform":
            if not self.low < self.high:
                raise ValueError(f"uniform needs a < b, got ({self.low}, {self.high})")
        else:
            raise ValueError(f"unknown factor kind {self.kind!r}")

    @classmethod
    def bernoulli(cls, p: float = 0.5) -> "FactorSpec":
        return cls("bernoulli", p=p)

    @classmethod
    def categorical(cls, k: int) -> "FactorSpec":
        return cls("categorical", k=k)

    @classmethod
    def uniform(cls, low: float = -1.0, high: float = 1.0) -> "FactorSpec":
        return cls("uniform", low=low, high=high)

    @classmethod
    def parse(cls, text: str) -> "FactorSpec":
        """Parse ``bernoulli:0.5``, ``categorical:3`` or ``uniform:-1:1``."""
        parts = text.strip().split(":")
        kind = parts[0].strip().lower()
        try:
            if kind == "bernoulli":
                return cls.bernoulli(float(parts[1]) if len(parts) > 1 else 0.5)
            if kind == "categorical":
                return cls.categorical(int(parts[1]))
            if kind == "uniform":
                if len(parts) == 1:
                    return cls.uniform()
                return cls.uniform(float(parts[1]), float(parts[2]))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"bad factor spec {text!r}: {exc}") from None
        raise ValueError(f"unknown factor kind in {text!r}")

    def format(self) -> str:
        if self.kind == "bernoulli":
            return f"bernoulli:{self.p!r}"
        if self.kind == "categorical":
            return f"categorical:{self.k}"
        return f"uniform:{self.low!r}:{self.high!r}"

    @property
    def discrete(self) -> bool:
        return self.kind != "uniform"

    @property
    def cardinality(self) -> int:
        if self.kind == "bernoulli":
            return 2
        if self.kind == "categorical":
            return self.k
        raise ValueError("continuous factor has no cardinality")

    @property
    def encoding_width(self) -> int:
        return self.k if self.kind == "categorical" else 1

    @property
    def q_width(self) -> int:
        """Number of Q-head outputs: logits for discrete, (mean, log-variance) for continuous."""
        return self.cardinality if self.discrete else 2

    def probabilities(self) -> np.ndarray:
        if self.kind == "bernoulli":
            return np.array([1.0 - self.p, self.p])
        if self.kind == "categorical":
            return np.full(self.k, 1.0 / self.k)
        raise ValueError("continuous factor has no probability table")

    def entropy(self) -> float:
        """Shannon entropy in nats; differential entropy for uniform factors."""
        if self.kind == "uniform":
            return math.log(self.high - self.low)
        p = self.probabilities()
        return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class LatentSpec:
    noise_dim: int
    factors: tuple

    def __post_init__(self):
        if self.noise_dim < 0:
            raise ValueError("noise_dim must be >= 0")
        if len(self.factors) < 1:
            raise ValueError("need at least one latent factor")
        object.__setattr__(self, "factors", tuple(self.factors))

    @classmethod
    def default(cls) -> "LatentSpec":
        return cls(32, (FactorSpec.bernoulli(0.5), FactorSpec.bernoulli(0.5), FactorSpec.categorical(3),
                        FactorSpec.uniform(), FactorSpec.uniform(), FactorSpec.uniform()))

    @classmethod
    def discrete_default(cls) -> "LatentSpec":
        return cls(32, (FactorSpec.bernoulli(0.5), FactorSpec.bernoulli(0.5), FactorSpec.categorical(3)))

    @property
    def encoding_width(self) -> int:
        return self.noise_dim + sum(f.encoding_width for f in self.factors)

    @property
    def q_width(self) -> int:
        return sum(f.q_width for f in self.factors)

    @property
    def all_discrete(self) -> bool:
        return all(f.discrete for f in self.factors)

    def entropy(self) -> float:
        """H(C) = sum of factor entropies (the prior factorizes)."""
        return float(sum(f.entropy() for f in self.factors))

    def q_slices(self) -> List[slice]:
        out, start = [], 0
        for f in self.factors:
            out.append(slice(start, start + f.q_width))
            start += f.q_width
        return out


@dataclass
class LatentSample:
    """A batch of latent draws.

    ``c`` holds one column per factor: the bit for bernoulli, the index for
    categorical, the real value for uniform.
    """

    z_prime: np.ndarray
    c: np.ndarray
    encoding: np.ndarray = field(repr=False)

    def __len__(self):
        return self.c.shape[0]


def encode(spec: LatentSpec, z_prime: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Network input: z' followed by each factor (bernoulli as -1/+1, categorical one-hot)."""
    z_prime = np.atleast_2d(np.asarray(z_prime, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    cols = [z_prime]
    for i, f in enumerate(spec.factors):
        v = c[:, i]
        if f.kind == "bernoulli":
            cols.append((2.0 * v - 1.0)[:, None])
        elif f.kind == "categorical":
            cols.append(np.eye(f.k)[v.astype(int)])
        else:
            cols.append(v[:, None])
    return np.concatenate(cols, axis=1)


def make_sample(spec: LatentSpec, z_prime, c) -> LatentSample:
    z_prime = np.atleast_2d(np.asarray(z_prime, dtype=np.float64)).reshape(-1, spec.noise_dim)
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    return LatentSample(z_prime, c, encode(spec, z_prime, c))


def sample(spec: LatentSpec, rng: np.random.Generator, n: int = 1) -> LatentSample:
    """Draw ``n`` independent latent codes from the factorized prior."""
    z = rng.standard_normal((n, spec.noise_dim))
    c = np.empty((n, len(spec.factors)))
    for i, f in enumerate(spec.factors):
        if f.kind == "bernoulli":
            c[:, i] = (rng.random(n) < f.p).astype(np.float64)
        elif f.kind == "categorical":
            c[:, i] = rng.integers(0, f.k, size=n)
        else:
            c[:, i] = rng.uniform(f.low, f.high, size=n)
    return LatentSample(z, c, encode(spec, z, c))


def log_prior(spec: LatentSpec, c) -> np.ndarray:
    """log p(c) per row; uniform factors contribute the density -log(b - a)."""
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    out = np.zeros(c.shape[0])
    for i, f in enumerate(spec.factors):
        v = c[:, i]
        if f.discrete:
            idx = v.astype(int)
            if np.any(idx != v) or np.any(idx < 0) or np.any(idx >= f.cardinality):
                raise ValueError(f"factor {i} ({f.kind}): value outside support")
            out += np.log(f.probabilities())[idx]
        else:
            if np.any(v < f.low) or np.any(v > f.high):
                raise ValueError(f"factor {i} (uniform): value outside [{f.low}, {f.high}]")
            out -= math.log(f.high - f.low)
    return out


class QPosterior:
    """Per-factor posterior parameters for a batch of images, as emitted by the Q head."""

    def __init__(self, spec: LatentSpec, params: np.ndarray):
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        if params.shape[1] != spec.q_width:
            raise T.ShapeError(f"QPosterior: expected {spec.q_width} columns, got {params.shape[1]}")
        self.spec = spec
        self.params = params

    def __len__(self):
        return self.params.shape[0]

    def factor_params(self, i: int) -> np.ndarray:
        return self.params[:, self.spec.q_slices()[i]]

    def logits(self, i: int) -> np.ndarray:
        if not self.spec.factors[i].discrete:
            raise ValueError(f"factor {i} is continuous")
        return self.factor_params(i)

    def probabilities(self, i: int) -> np.ndarray:
        lg = self.logits(i)
        lg = lg - lg.max(axis=1, keepdims=True)
        e = np.exp(lg)
        return e / e.sum(axis=1, keepdims=True)

    def mean(self, i: int) -> np.ndarray:
        return self.factor_params(i)[:, 0]

    def variance(self, i: int) -> np.ndarray:
        return np.exp(self.factor_params(i)[:, 1])

    def factor_log_prob(self, i: int, values) -> np.ndarray:
        """log Q(c_i | x) per row."""
        values = np.asarray(values, dtype=np.float64)
        f = self.spec.factors[i]
        if f.discrete:
            lg = self.logits(i)
            lse = np.logaddexp.reduce(lg, axis=1)
            return lg[np.arange(len(lg)), values.astype(int)] - lse
        p = self.factor_params(i)
        mu, logvar = p[:, 0], p[:, 1]
        return -0.5 * (_LOG_2PI + logvar + (values - mu) ** 2 * np.exp(-logvar))


def q_log_prob(posterior: QPosterior, c) -> np.ndarray:
    """Mean-field log Q(c | x) = sum_i log Q(c_i | x), per row."""
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    return np.sum([posterior.factor_log_prob(i, c[:, i]) for i in range(len(posterior.spec.factors))], axis=0)


def q_log_prob_graph(spec: LatentSpec, q_out: T.Tensor, c: np.ndarray) -> T.Tensor:
    """Differentiable version of :func:`q_log_prob`; returns a (B,) node."""
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    terms = []
    for i, (f, sl) in enumerate(zip(spec.factors, spec.q_slices())):
        block = q_out[:, sl]
        if f.discrete:
            onehot = np.eye(f.cardinality)[c[:, i].astype(int)]
            log_soft = block - T.logsumexp(block, axis=1)
            terms.append(T.sum(log_soft * onehot, axis=1))
        else:
            mu = block[:, 0]
            logvar = block[:, 1]
            terms.append(T.gaussian_log_density(c[:, i], mu, logvar))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def sweep_values(f: FactorSpec, n_continuous: int = 7) -> np.ndarray:
    """Values visited by a factor sweep: the full support, or evenly spaced points."""
    if f.discrete:
        return np.arange(f.cardinality, dtype=np.float64)
    return np.linspace(f.low, f.high, n_continuous)


def parse_factors(lines: Sequence[str]) -> tuple:
    return tuple(FactorSpec.parse(s) for s in lines)
