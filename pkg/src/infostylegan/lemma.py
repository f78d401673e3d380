"""Exact information quantities on finite channels p(x|c) with a factorized discrete prior.

Everything is computed by summation in nats. For the posterior p(c|x) of a
channel the identities checked here are

    I(C;X) = sum_i I(C_i;X) + E_x[TC(C|x)]
    H(C) >= I(C;X) >= sum_i I(C_i;X) >= L_info(Q)       for mean-field Q
    I(C;X) - L_info(Q*) = E_x[TC(C|x)]                   Q*_i(c_i|x) = p(c_i|x)

so the gap between the mutual information and the best mean-field bound is
exactly the expected conditional total correlation. Symbols x with p(x) = 0
are skipped in every conditional term.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

TOL = 1e-10
_DIST_TOL = 1e-12


class LemmaViolation(AssertionError):
    pass


def _check_distribution(p: np.ndarray, axis: int, what: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"{what}: negative probability")
    s = p.sum(axis=axis)
    if np.any(np.abs(s - 1.0) > _DIST_TOL):
        raise ValueError(f"{what}: does not sum to 1 (max deviation {np.abs(s - 1.0).max():.3g})")


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> float:
    """sum p log(p / q) over p > 0."""
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class FactoredPrior:
    factors: List[np.ndarray]

    def __post_init__(self):
        self.factors = [np.asarray(f, dtype=np.float64) for f in self.factors]
        if not self.factors:
            raise ValueError("prior needs at least one factor")
        for i, f in enumerate(self.factors):
            if f.ndim != 1 or len(f) < 1:
                raise ValueError(f"factor {i}: expected a 1-D probability vector")
            _check_distribution(f, 0, f"factor {i}")

    @classmethod
    def uniform(cls, sizes: Sequence[int]) -> "FactoredPrior":
        return cls([np.full(k, 1.0 / k) for k in sizes])

    @property
    def sizes(self) -> tuple:
        return tuple(len(f) for f in self.factors)

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.sizes))

    def joint(self) -> np.ndarray:
        """p(c) flattened in C order over (c_1, ..., c_L)."""
        out = self.factors[0]
        for f in self.factors[1:]:
            out = np.multiply.outer(out, f)
        return np.asarray(out).reshape(-1)

    def factor_entropies(self) -> np.ndarray:
        return np.array([_entropy(f) for f in self.factors])

    def entropy(self) -> float:
        return float(self.factor_entropies().sum())


@dataclass
class DiscreteChannel:
    """Conditional table p(x | c): one row per joint factor value, one column per symbol."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ValueError("channel table must be 2-D (joint values x symbols)")
        _check_distribution(self.table, 1, "channel row")

    @property
    def n_symbols(self) -> int:
        return self.table.shape[1]


@dataclass
class MeanFieldEncoder:
    """Per-factor tables Q(c_i | x), each of shape (k_i, M)."""

    tables: List[np.ndarray]

    def __post_init__(self):
        self.tables = [np.asarray(t, dtype=np.float64) for t in self.tables]
        for i, t in enumerate(self.tables):
            _check_distribution(t, 0, f"encoder factor {i}")


@dataclass
class InfoReport:
    mutual_info: float
    factor_mutual_info: np.ndarray
    expected_tc: float
    tc_per_symbol: np.ndarray  # nan where p(x) = 0
    symbol_marginal: np.ndarray
    entropy: float
    factor_entropies: np.ndarray
    l_info: Optional[float] = None

    def bits(self, value: float) -> float:
        return value / math.log(2.0)


def _joint(prior: FactoredPrior, channel: DiscreteChannel) -> np.ndarray:
    if channel.table.shape[0] != prior.n_joint:
        raise ValueError(f"channel has {channel.table.shape[0]} rows, prior has {prior.n_joint} joint values")
    return prior.joint()[:, None] * channel.table  # p(c, x)


def _factor_joints(prior: FactoredPrior, pcx: np.ndarray) -> List[np.ndarray]:
    """p(c_i, x) for every factor, each (k_i, M)."""
    sizes = prior.sizes
    full = pcx.reshape(sizes + (pcx.shape[1],))
    out = []
    for i in range(len(sizes)):
        axes = tuple(a for a in range(len(sizes)) if a != i)
        out.append(full.sum(axis=axes) if axes else full)
    return out


def exact_information_report(prior: FactoredPrior, channel: DiscreteChannel,
                             encoder: Optional[MeanFieldEncoder] = None) -> InfoReport:
    pcx = _joint(prior, channel)
    pc = prior.joint()
    px = pcx.sum(axis=0)
    mi = _xlogy_ratio(pcx, pc[:, None] * px[None, :])

    factor_mi = []
    for f, pjx in zip(prior.factors, _factor_joints(prior, pcx)):
        factor_mi.append(_xlogy_ratio(pjx, f[:, None] * px[None, :]))

    sizes = prior.sizes
    tc = np.full(channel.n_symbols, np.nan)
    for x in np.flatnonzero(px > 0):
        post = (pcx[:, x] / px[x]).reshape(sizes)
        prod = None
        for i in range(len(sizes)):
            axes = tuple(a for a in range(len(sizes)) if a != i)
            marg = post.sum(axis=axes) if axes else post
            prod = marg if prod is None else np.multiply.outer(prod, marg)
        tc[x] = _xlogy_ratio(post.reshape(-1), np.asarray(prod).reshape(-1))
    live = px > 0
    expected_tc = float(np.sum(px[live] * tc[live]))

    report = InfoReport(mi, np.array(factor_mi), expected_tc, tc, px, prior.entropy(), prior.factor_entropies())
    if encoder is not None:
        report.l_info = l_info_exact(prior, channel, encoder)
    return report


def l_info_exact(prior: FactoredPrior, channel: DiscreteChannel, encoder: MeanFieldEncoder) -> float:
    """sum_{c,x} p(c) p(x|c) log Q(c|x) + H(C); -inf if Q misses a reachable (c, x)."""
    if len(encoder.tables) != len(prior.factors) or any(
            t.shape != (k, channel.n_symbols) for t, k in zip(encoder.tables, prior.sizes)):
        raise ValueError("encoder tables do not match prior factor sizes and channel symbols")
    pcx = _joint(prior, channel)
    total = 0.0
    # mean field: log Q(c|x) = sum_i log Q_i(c_i|x), so only the per-factor joints are needed
    for pjx, q in zip(_factor_joints(prior, pcx), encoder.tables):
        mask = pjx > 0
        if np.any(q[mask] == 0):
            return -math.inf
        total += float(np.sum(pjx[mask] * np.log(q[mask])))
    return total + prior.entropy()


def optimal_mean_field_encoder(prior: FactoredPrior, channel: DiscreteChannel) -> MeanFieldEncoder:
    """Q_i(c_i|x) = p(c_i|x); unreachable symbols get the prior marginal."""
    pcx = _joint(prior, channel)
    px = pcx.sum(axis=0)
    tables = []
    for f, pjx in zip(prior.factors, _factor_joints(prior, pcx)):
        t = np.tile(f[:, None], (1, channel.n_symbols))
        live = px > 0
        t[:, live] = pjx[:, live] / px[live]
        tables.append(t)
    return MeanFieldEncoder(tables)


def prior_encoder(prior: FactoredPrior, n_symbols: int) -> MeanFieldEncoder:
    return MeanFieldEncoder([np.tile(f[:, None], (1, n_symbols)) for f in prior.factors])


def random_encoder(prior: FactoredPrior, n_symbols: int, rng: np.random.Generator) -> MeanFieldEncoder:
    return MeanFieldEncoder([rng.dirichlet(np.ones(k), size=n_symbols).T for k in prior.sizes])


# ---------------------------------------------------------------------------
# checks


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    relation: str  # "==" or ">="
    tolerance: float

    @property
    def residual(self) -> float:
        return self.lhs - self.rhs

    @property
    def passed(self) -> bool:
        if self.relation == "==":
            return abs(self.residual) <= self.tolerance
        return self.residual >= -self.tolerance


@dataclass
class LemmaReport:
    info: InfoReport
    l_info_optimal: float
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def gap(self) -> float:
        return self.info.mutual_info - self.l_info_optimal

    def failures(self) -> List[Check]:
        return [c for c in self.checks if not c.passed]

    def raise_if_failed(self) -> None:
        bad = self.failures()
        if bad:
            c = bad[0]
            raise LemmaViolation(f"{c.name}: {c.lhs!r} {c.relation} {c.rhs!r} violated "
                                 f"(residual {c.residual:.3e}, tolerance {c.tolerance:.1e})")


def verify_lemma_identities(prior: FactoredPrior, channel: DiscreteChannel,
                            extra_encoders: Sequence[MeanFieldEncoder] = (), tol: float = TOL) -> LemmaReport:
    info = exact_information_report(prior, channel)
    opt = optimal_mean_field_encoder(prior, channel)
    l_opt = l_info_exact(prior, channel, opt)
    sum_i = float(info.factor_mutual_info.sum())
    checks = [
        Check("decomposition I = sum_i I_i + E[TC]", info.mutual_info, sum_i + info.expected_tc, "==", tol),
        Check("H(C) >= I(C;X)", info.entropy, info.mutual_info, ">=", tol),
        Check("I(C;X) >= sum_i I(C_i;X)", info.mutual_info, sum_i, ">=", tol),
        Check("sum_i I(C_i;X) >= L_info(optimal)", sum_i, l_opt, ">=", tol),
        Check("gap I - L_info(optimal) = E[TC]", info.mutual_info - l_opt, info.expected_tc, "==", tol),
        Check("sum_i I(C_i;X) = L_info(optimal)", sum_i, l_opt, "==", tol),
    ]
    live = info.symbol_marginal > 0
    checks.append(Check("min_x TC(C|x) >= 0", float(np.min(info.tc_per_symbol[live])), 0.0, ">=", _DIST_TOL))
    for j, enc in enumerate([prior_encoder(prior, channel.n_symbols), *extra_encoders]):
        label = "prior" if j == 0 else f"encoder {j}"
        checks.append(Check(f"sum_i I(C_i;X) >= L_info({label})", sum_i,
                            l_info_exact(prior, channel, enc), ">=", tol))
    return LemmaReport(info, l_opt, checks)


# ---------------------------------------------------------------------------
# reference channels


def identity_channel(sizes: Sequence[int] = (2, 2)) -> DiscreteChannel:
    return DiscreteChannel(np.eye(int(np.prod(sizes))))


def xor_channel(n_symbols: int = 2, symbols: Sequence[int] = (0, 1)) -> DiscreteChannel:
    """Two bits; the output symbol reveals only c1 XOR c2."""
    t = np.zeros((4, n_symbols))
    for c1 in range(2):
        for c2 in range(2):
            t[2 * c1 + c2, symbols[c1 ^ c2]] = 1.0
    return DiscreteChannel(t)


def product_channel(flip: float = 0.1) -> DiscreteChannel:
    """X = (X1, X2) with X_i a binary-symmetric copy of C_i; symbol index 2*x1 + x2."""
    bsc = np.array([[1 - flip, flip], [flip, 1 - flip]])
    t = np.zeros((4, 4))
    for c1 in range(2):
        for c2 in range(2):
            t[2 * c1 + c2] = np.outer(bsc[c1], bsc[c2]).reshape(-1)
    return DiscreteChannel(t)


def random_channel(rng: np.random.Generator, n_joint: int = 4, n_symbols: int = 8) -> DiscreteChannel:
    return DiscreteChannel(rng.dirichlet(np.ones(n_symbols), size=n_joint))


def random_prior(rng: np.random.Generator, sizes: Sequence[int] = (2, 2)) -> FactoredPrior:
    return FactoredPrior([rng.dirichlet(np.ones(k)) for k in sizes])


def mix_channels(a: DiscreteChannel, b: DiscreteChannel, eps: float) -> DiscreteChannel:
    return DiscreteChannel((1.0 - eps) * a.table + eps * b.table)


def random_channel_suite(n: int, seed: int, n_symbols: int = 8, sizes: Sequence[int] = (2, 2)):
    """Seeded (prior, channel) pairs with Dirichlet(1) rows and Dirichlet(1) factor marginals."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        prior = random_prior(rng, sizes)
        out.append((prior, random_channel(rng, prior.n_joint, n_symbols)))
    return out


# ---------------------------------------------------------------------------
# limit experiment


@dataclass
class LimitPoint:
    eps: float
    mutual_info: float
    l_info_optimal: float
    expected_tc: float

    @property
    def gap(self) -> float:
        return self.mutual_info - self.l_info_optimal


def default_family(eps: float) -> DiscreteChannel:
    """Product channel at eps = 0, XOR channel (same 4 symbols) at eps = 1."""
    return mix_channels(product_channel(0.1), xor_channel(4, (0, 2)), eps)


def lemma_limit_experiment(family: Callable[[float], DiscreteChannel] = default_family,
                           prior: Optional[FactoredPrior] = None, n_points: int = 11,
                           tol: float = TOL) -> List[LimitPoint]:
    """Trace (gap, E[TC]) along ``family`` on an even eps grid over [0, 1].

    Raises LemmaViolation if E[TC] differs from the gap at any point or if a
    vanishing gap does not come with vanishing E[TC].
    """
    prior = FactoredPrior.uniform((2, 2)) if prior is None else prior
    points = []
    for eps in np.linspace(0.0, 1.0, n_points):
        ch = family(float(eps))
        info = exact_information_report(prior, ch)
        l_opt = l_info_exact(prior, ch, optimal_mean_field_encoder(prior, ch))
        pt = LimitPoint(float(eps), info.mutual_info, l_opt, info.expected_tc)
        if abs(pt.gap - pt.expected_tc) > tol:
            raise LemmaViolation(f"eps={eps:.3f}: gap {pt.gap!r} != E[TC] {pt.expected_tc!r}")
        points.append(pt)
    for pt in points:
        if abs(pt.gap) <= tol and pt.expected_tc > tol:
            raise LemmaViolation(f"eps={pt.eps:.3f}: gap vanishes but E[TC] = {pt.expected_tc!r}")
    return points


def write_limit_csv(points: Sequence[LimitPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("eps", "mutual_info", "l_info_optimal", "expected_tc", "gap"))
        for p in points:
            w.writerow((repr(p.eps), repr(p.mutual_info), repr(p.l_info_optimal), repr(p.expected_tc), repr(p.gap)))


def is_monotone(values: Sequence[float], tol: float = TOL) -> bool:
    d = np.diff(np.asarray(values))
    return bool(np.all(d >= -tol) or np.all(d <= tol))
