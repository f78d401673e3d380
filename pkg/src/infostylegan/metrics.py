"""Sample-quality and disentanglement metrics: FID, k-NN precision/recall and MIG."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .latent import LatentSpec, QPosterior

DESK_FEATURE_SEED = 0xF1D
DESK_FEATURE_DIM = 64
_PSD_TOL = 1e-8


@dataclass
class FeatureSet:
    values: np.ndarray  # (n, d)
    provenance: str = "external"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ValueError(f"feature set needs shape (n >= 2, d), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature set contains non-finite entries")

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dim {d}")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-10:
            raise ValueError("covariance is not symmetric")
        lo = np.linalg.eigvalsh(self.cov).min()
        if lo < -_PSD_TOL * max(1.0, np.abs(self.cov).max()):
            raise ValueError(f"covariance is not positive semi-definite (eigenvalue {lo:.3g})")


def gaussian_fit(features) -> GaussianStats:
    x = features.values if isinstance(features, FeatureSet) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("gaussian_fit needs at least two feature vectors")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(stats_r: GaussianStats, stats_g: GaussianStats) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2))."""
    if stats_r.mean.shape != stats_g.mean.shape:
        raise ValueError(f"dimension mismatch: {stats_r.mean.shape[0]} vs {stats_g.mean.shape[0]}")
    # Tr (S_r^1/2 S_g S_r^1/2)^1/2 is the nuclear norm of S_r^1/2 S_g^1/2; singular values stay
    # accurate near zero, where square roots of tiny eigenvalues would amplify rounding
    tr_sqrt = float(np.linalg.svd(_psd_sqrt(stats_r.cov) @ _psd_sqrt(stats_g.cov), compute_uv=False).sum())
    diff = stats_r.mean - stats_g.mean
    value = float(diff @ diff + np.trace(stats_r.cov) + np.trace(stats_g.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0) if value > -_PSD_TOL else value


_desk_models = None


def desk_features(images) -> FeatureSet:
    """Dense features of a frozen, randomly initialised discriminator trunk (seed 0xF1D)."""
    global _desk_models
    from . import models as M

    if _desk_models is None:
        _desk_models = M.init_models(M.ModelConfig(dense_width=DESK_FEATURE_DIM), seed=DESK_FEATURE_SEED)
    _, _, dense = M.discriminate(_desk_models, images)
    return FeatureSet(dense, "fixed-random-conv")


def fid_from_features(a, b) -> float:
    return fid(gaussian_fit(a), gaussian_fit(b))


# ---------------------------------------------------------------------------
# precision / recall


def _as_array(f) -> np.ndarray:
    x = f.values if isinstance(f, FeatureSet) else np.asarray(f, dtype=np.float64)
    return x.reshape(len(x), -1)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def knn_radii(points, k: int, chunk: int = 1024) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour in the same set, itself excluded."""
    x = _as_array(points)
    n = len(x)
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    out = np.empty(n)
    for s in range(0, n, chunk):
        d = _sq_dists(x[s:s + chunk], x)
        d[np.arange(d.shape[0]), np.arange(s, s + d.shape[0])] = np.inf
        out[s:s + chunk] = np.sqrt(np.partition(d, k - 1, axis=1)[:, k - 1])
    return out


def manifold_coverage(queries, support, k: int, chunk: int = 1024) -> float:
    """Fraction of ``queries`` inside the union of k-NN balls around ``support``."""
    q, s = _as_array(queries), _as_array(support)
    r2 = knn_radii(s, k) ** 2
    inside = 0
    for i in range(0, len(q), chunk):
        d = _sq_dists(q[i:i + chunk], s)
        # the rounding slack keeps exact duplicates and boundary points inside
        inside += int(np.any(d <= r2[None, :] * (1 + 1e-12) + 1e-12, axis=1).sum())
    return inside / len(q)


def precision_recall(real, fake, k: int = 3):
    real_x, fake_x = _as_array(real), _as_array(fake)
    if k >= len(real_x) or k >= len(fake_x):
        raise ValueError(f"k={k} must be smaller than both set sizes ({len(real_x)}, {len(fake_x)})")
    return manifold_coverage(fake_x, real_x, k), manifold_coverage(real_x, fake_x, k)


# ---------------------------------------------------------------------------
# MIG


@dataclass
class MigReport:
    attribute_names: List[str]
    factor_names: List[str]
    mi: np.ndarray  # (K, L) clamped at 0
    mi_raw: np.ndarray
    mi_se: np.ndarray
    attribute_entropy: np.ndarray  # (K,)
    argmax: np.ndarray  # (K,)
    gaps: np.ndarray  # (K,) normalised
    gap_se: np.ndarray
    mig: float
    mig_se: float
    max_mi: float
    inner_cap: int
    mc_samples: int
    excluded: List[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attribute", *self.factor_names, "argmax", "gap"])
            for k, name in enumerate(self.attribute_names):
                w.writerow([name, *(repr(float(v)) for v in self.mi[k]), self.factor_names[self.argmax[k]],
                            repr(float(self.gaps[k]))])


def _factor_entropy(f) -> float:
    return f.entropy() if f.discrete else math.log(f.high - f.low)


def _log_mean_exp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


def _inner_subsets(labels_k: np.ndarray, values: np.ndarray, cap: int, rng) -> dict:
    out = {}
    for v in values:
        members = np.flatnonzero(labels_k == v)
        if len(members) > cap:
            members = np.sort(rng.choice(members, size=cap, replace=False))
        out[int(v)] = members
    return out


def _mi_samples(posterior: QPosterior, i: int, rows: np.ndarray, labels_k: np.ndarray,
                subsets: dict, rng: np.random.Generator) -> np.ndarray:
    """Per-draw values log sum_{x~ in X_v} Q(c'|x~) p(x~|v) + H(C_i)."""
    f = posterior.spec.factors[i]
    v = labels_k[rows]
    if f.discrete:
        probs = posterior.probabilities(i)
        with np.errstate(divide="ignore"):
            logq = np.log(probs)
        cum = np.cumsum(probs[rows], axis=1)
        u = rng.random(len(rows))[:, None]
        c_draw = np.minimum((u > cum).sum(axis=1), f.cardinality - 1)
        # inner term depends only on (v, c'), so tabulate it
        table = {val: _log_mean_exp(logq[idx], axis=0) for val, idx in subsets.items()}
        inner = np.array([table[int(a)][b] for a, b in zip(v, c_draw)])
    else:
        mu_all, var_all = posterior.mean(i), posterior.variance(i)
        c_draw = mu_all[rows] + np.sqrt(var_all[rows]) * rng.standard_normal(len(rows))
        inner = np.empty(len(rows))
        for val, idx in subsets.items():
            sel = np.flatnonzero(v == val)
            mu, var = mu_all[idx][None, :], var_all[idx][None, :]
            for s in range(0, len(sel), 2048):
                part = sel[s:s + 2048]
                logd = -0.5 * (np.log(2 * np.pi * var) + (c_draw[part, None] - mu) ** 2 / var)
                inner[part] = _log_mean_exp(logd, axis=1)
    return inner + _factor_entropy(f)


def mig(labels, posterior: QPosterior, mc_samples: int = 20000, seed: int = 0, inner_cap: int = 256,
        attribute_names: Optional[Sequence[str]] = None, factor_names: Optional[Sequence[str]] = None,
        subset_seed: int = 0) -> MigReport:
    """Monte Carlo MIG of Q posteriors against discrete ground-truth attributes.

    ``labels`` is (n, K) integer attributes, ``posterior`` holds Q(C|x) for
    the same n items. Drawing v from the empirical label marginal and then x
    uniformly from X_v is a uniform draw over items. The inner sum runs over
    a subsample of X_v of at most ``inner_cap`` items, chosen with
    ``subset_seed`` so that different ``seed`` values share it.
    """
    labels = np.atleast_2d(np.asarray(labels)).astype(int)
    n, n_attr = labels.shape
    if len(posterior) != n:
        raise ValueError(f"{len(posterior)} posteriors for {n} labelled items")
    spec: LatentSpec = posterior.spec
    attribute_names = list(attribute_names or [f"V{k}" for k in range(n_attr)])
    factor_names = list(factor_names or [f"C{i}" for i in range(len(spec.factors))])
    if len(spec.factors) < 2:
        raise ValueError("MIG needs at least two latent factors")
    rng = np.random.default_rng(seed)
    sub_rng = np.random.default_rng(subset_seed)

    keep, excluded = [], []
    for k in range(n_attr):
        if len(np.unique(labels[:, k])) < 2:
            warnings.warn(f"attribute {attribute_names[k]!r} has a single observed value; excluded from MIG")
            excluded.append(attribute_names[k])
        else:
            keep.append(k)
    if not keep:
        raise ValueError("no attribute has two or more observed values")

    n_fac = len(spec.factors)
    raw = np.zeros((len(keep), n_fac))
    se = np.zeros_like(raw)
    ent = np.zeros(len(keep))
    for r, k in enumerate(keep):
        values, counts = np.unique(labels[:, k], return_counts=True)
        p = counts / n
        ent[r] = float(-(p * np.log(p)).sum())
        subsets = _inner_subsets(labels[:, k], values, inner_cap, sub_rng)
        for i in range(n_fac):
            rows = rng.integers(0, n, size=mc_samples)
            s = _mi_samples(posterior, i, rows, labels[:, k], subsets, rng)
            raw[r, i] = s.mean()
            se[r, i] = s.std(ddof=1) / math.sqrt(mc_samples) if mc_samples > 1 else 0.0
    mi = np.maximum(raw, 0.0)
    order = np.argsort(-mi, axis=1, kind="stable")
    top, second = order[:, 0], order[:, 1]
    idx = np.arange(len(keep))
    gaps = (mi[idx, top] - mi[idx, second]) / ent
    gap_se = np.sqrt(se[idx, top] ** 2 + se[idx, second] ** 2) / ent
    return MigReport(
        attribute_names=[attribute_names[k] for k in keep], factor_names=factor_names,
        mi=mi, mi_raw=raw, mi_se=se, attribute_entropy=ent, argmax=top, gaps=gaps, gap_se=gap_se,
        mig=float(gaps.mean()), mig_se=float(np.sqrt((gap_se ** 2).sum()) / len(keep)),
        max_mi=float(mi.max()), inner_cap=inner_cap, mc_samples=mc_samples, excluded=excluded)


def exact_discrete_mig_terms(labels, probs: Sequence[np.ndarray], entropies: Sequence[float]) -> np.ndarray:
    """Exact expectation of the per-draw MI term (no inner cap) for discrete posteriors.

    ``probs[i]`` is the (n, k_i) table Q(C_i|x). Returns (K, L) raw values.
    """
    labels = np.atleast_2d(np.asarray(labels)).astype(int)
    n = labels.shape[0]
    out = np.zeros((labels.shape[1], len(probs)))
    for k in range(labels.shape[1]):
        for i, q in enumerate(probs):
            total = 0.0
            for v in np.unique(labels[:, k]):
                members = np.flatnonzero(labels[:, k] == v)
                qbar = q[members].mean(axis=0)  # sum_x~ Q(c'|x~) p(x~|v)
                pv = len(members) / n
                for c in range(q.shape[1]):
                    if qbar[c] > 0:
                        total += pv * qbar[c] * math.log(qbar[c])
            out[k, i] = total + entropies[i]
    return out
