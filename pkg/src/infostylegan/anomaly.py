"""Anomaly detection on discriminator embeddings: whitening, one-class SVM, LOF and evaluation.

All detector scores are oriented so that higher means more inlier-like.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import imaging
from . import models as M
from .metrics import FeatureSet

SOURCES = ("q", "conv", "dense")
DETECTORS = ("ocsvm", "lof")
KKT_TOL = 1e-6
DIST_FLOOR = 1e-12


class ConvergenceError(RuntimeError):
    pass


def extract_embeddings(models: M.Models, images, source: str) -> FeatureSet:
    source = source.lower()
    if source not in SOURCES:
        raise ValueError(f"unknown embedding source {source!r}; expected one of {SOURCES}")
    _, conv, dense = M.discriminate(models, images)
    if source == "conv":
        return FeatureSet(conv, "conv")
    if source == "dense":
        return FeatureSet(dense, "dense")
    qp = models.q_head.params
    return FeatureSet(dense @ qp["q.weight"] + qp["q.bias"], "q")


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureSet) else np.atleast_2d(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# whitening


@dataclass
class WhiteningTransform:
    mean: np.ndarray
    projection: np.ndarray  # (d, kept)
    eigenvalues: np.ndarray  # kept eigenvalues, descending

    @property
    def n_components(self) -> int:
        return self.projection.shape[1]

    def __call__(self, x) -> np.ndarray:
        return (_values(x) - self.mean) @ self.projection


def fit_whitening(train, n_components: Optional[int] = None, floor: float = 1e-10) -> WhiteningTransform:
    """PCA whitening; components with eigenvalue <= floor * max are always dropped."""
    x = _values(train)
    if x.shape[0] < 2:
        raise ValueError("whitening needs at least two training vectors")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    keep = w > floor * max(w[0], 0.0) if w[0] > 0 else np.zeros(len(w), bool)
    if not keep.any():
        raise ValueError("training features have zero variance")
    w, v = w[keep], v[:, keep]
    if n_components is not None:
        w, v = w[:n_components], v[:, :n_components]
    return WhiteningTransform(mu, v / np.sqrt(w), w)


# ---------------------------------------------------------------------------
# one-class SVM


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(d, 0.0))


def default_gamma(x) -> float:
    x = _values(x)
    return 1.0 / (x.shape[1] * float(x.var(axis=0, ddof=1).mean()))


@dataclass
class OcsvmModel:
    alpha: np.ndarray  # support coefficients
    support: np.ndarray  # support vectors
    rho: float
    gamma: float
    nu: float
    iterations: int = 0

    def decision(self, x) -> np.ndarray:
        return rbf_kernel(_values(x), self.support, self.gamma) @ self.alpha - self.rho


def ocsvm_fit(train, nu: float = 0.5, gamma: Optional[float] = None, tol: float = KKT_TOL,
              max_iter: Optional[int] = None) -> OcsvmModel:
    """nu-one-class SVM dual: min 1/2 a'Ka  s.t.  0 <= a_i <= 1/(nu n), sum a = 1.

    Solved by SMO with second-order working-set selection until the maximal
    KKT violation is below ``tol``.
    """
    x = _values(train)
    n = x.shape[0]
    if not 0 < nu <= 1:
        raise ValueError(f"nu must be in (0, 1], got {nu}")
    if n < 2:
        raise ValueError("OCSVM needs at least two training points")
    gamma = default_gamma(x) if gamma is None else gamma
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    upper = 1.0 / (nu * n)
    kmat = rbf_kernel(x, x, gamma)
    diag = np.diag(kmat).copy()

    # feasible start: fill coefficients up to the bound in order
    alpha = np.zeros(n)
    n_full = int(math.floor(nu * n))
    alpha[:n_full] = upper
    if n_full < n:
        alpha[n_full] = 1.0 - alpha.sum()
    alpha = np.clip(alpha, 0.0, upper)
    grad = kmat @ alpha

    max_iter = max(100000, 1000 * n) if max_iter is None else max_iter
    eps_bound = 1e-15 * upper
    it = 0
    while True:
        up = alpha < upper - eps_bound
        low = alpha > eps_bound
        neg = -grad
        i = int(np.argmax(np.where(up, neg, -np.inf)))
        m_up = neg[i]
        m_low = np.min(np.where(low, neg, np.inf))
        violation = m_up - m_low
        if violation < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(f"OCSVM did not converge in {max_iter} iterations "
                                   f"(KKT violation {violation:.3e} > {tol:.1e})")
        b = grad - grad[i]  # > 0 for violating j
        a = np.maximum(diag[i] + diag - 2.0 * kmat[i], 1e-12)
        cand = low & (b > 0)
        j = int(np.argmax(np.where(cand, b * b / a, -np.inf)))
        # move mass from j to i along the equality constraint
        delta = b[j] / a[j]
        delta = min(delta, upper - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        grad += delta * (kmat[:, i] - kmat[:, j])
        it += 1

    free = (alpha > eps_bound) & (alpha < upper - eps_bound)
    if free.any():
        rho = float(grad[free].mean())
    else:
        at_upper = alpha >= upper - eps_bound
        lb = grad[at_upper].max() if at_upper.any() else -np.inf
        ub = grad[~at_upper].min() if (~at_upper).any() else np.inf
        rho = float((lb + ub) / 2.0)
    sv = alpha > 0
    return OcsvmModel(alpha[sv], x[sv].copy(), rho, gamma, nu, it)


def ocsvm_score(model: OcsvmModel, x) -> np.ndarray:
    return model.decision(x)


# ---------------------------------------------------------------------------
# local outlier factor


def _dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d, 0.0))


@dataclass
class LofModel:
    points: np.ndarray
    k: int
    k_distance: np.ndarray
    lrd: np.ndarray


def _neighbours(d: np.ndarray, k: int):
    idx = np.argpartition(d, k - 1, axis=1)[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def _lrd(k_distance, nb_idx, nb_dist) -> np.ndarray:
    reach = np.maximum(np.maximum(k_distance[nb_idx], nb_dist), DIST_FLOOR)
    return 1.0 / reach.mean(axis=1)


def lof_fit(train, k: int = 20) -> LofModel:
    x = _values(train)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"LOF needs 1 <= k < n (k={k}, n={n})")
    d = _dists(x, x)
    np.fill_diagonal(d, np.inf)
    idx, nd = _neighbours(d, k)
    kdist = nd.max(axis=1)
    return LofModel(x.copy(), k, kdist, _lrd(kdist, idx, nd))


def lof_factor(model: LofModel, x, chunk: int = 2048) -> np.ndarray:
    q = _values(x)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        idx, nd = _neighbours(_dists(q[s:s + chunk], model.points), model.k)
        out[s:s + chunk] = model.lrd[idx].mean(axis=1) / _lrd(model.k_distance, idx, nd)
    return out


def lof_score(model: LofModel, x) -> np.ndarray:
    return -lof_factor(model, x)


# ---------------------------------------------------------------------------
# evaluation


def rank_auc(scores_inlier, scores_outlier) -> float:
    """P(inlier score > outlier score) with ties counted as one half (Mann-Whitney)."""
    si = np.asarray(scores_inlier, dtype=np.float64).ravel()
    so = np.asarray(scores_outlier, dtype=np.float64).ravel()
    if len(si) == 0 or len(so) == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([si, so]))
    u = ranks[:len(si)].sum() - len(si) * (len(si) + 1) / 2.0
    return float(u / (len(si) * len(so)))


def roc_curve(scores_inlier, scores_outlier):
    """(fpr, tpr) treating outliers as positives flagged when score <= t, over all cut points."""
    si = np.asarray(scores_inlier, dtype=np.float64).ravel()
    so = np.asarray(scores_outlier, dtype=np.float64).ravel()
    cuts = np.unique(np.concatenate([si, so]))
    fpr = np.concatenate([[0.0], np.searchsorted(np.sort(si), cuts, side="right") / len(si)])
    tpr = np.concatenate([[0.0], np.searchsorted(np.sort(so), cuts, side="right") / len(so)])
    return fpr, tpr


def _confusion(si, so, threshold):
    """Counts with outlier = positive; an item is flagged when score < threshold."""
    si, so = np.asarray(si, dtype=np.float64), np.asarray(so, dtype=np.float64)
    tp = int((so < threshold).sum())
    fn = len(so) - tp
    fp = int((si < threshold).sum())
    tn = len(si) - fp
    return tp, fn, fp, tn


def accuracy_f1(si, so, threshold):
    tp, fn, fp, tn = _confusion(si, so, threshold)
    acc = (tp + tn) / (tp + fn + fp + tn)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, f1


def balanced_threshold(si, so) -> float:
    """Cut point maximizing balanced accuracy; midpoints between distinct scores are candidates."""
    vals = np.unique(np.concatenate([si, so]))
    cands = np.concatenate([[vals[0] - 1.0], (vals[:-1] + vals[1:]) / 2.0, [vals[-1] + 1.0]])
    si_sorted, so_sorted = np.sort(si), np.sort(so)
    tpr = np.searchsorted(so_sorted, cands, side="left") / len(so)
    tnr = 1.0 - np.searchsorted(si_sorted, cands, side="left") / len(si)
    return float(cands[int(np.argmax(tpr + tnr))])


@dataclass
class EvalReport:
    method: str
    auc: float
    auc_ci: tuple
    accuracy: float
    accuracy_ci: tuple
    f1: float
    threshold: float
    threshold_rule: str
    scores_inlier: np.ndarray = field(repr=False)
    scores_outlier: np.ndarray = field(repr=False)
    bootstrap_seed: int = 0
    n_bootstrap: int = 1000

    def csv_row(self):
        return (self.method, repr(self.auc), repr(self.auc_ci[0]), repr(self.auc_ci[1]),
                repr(self.accuracy), repr(self.accuracy_ci[0]), repr(self.accuracy_ci[1]), repr(self.f1))


REPORT_HEADER = ("method", "auc", "auc_lo", "auc_hi", "acc", "acc_lo", "acc_hi", "f1")


def _calibration_split(n: int, fraction: float, rng):
    perm = rng.permutation(n)
    n_cal = max(1, int(round(fraction * n)))
    if n_cal >= n:
        raise ValueError(f"cannot hold out a calibration split from {n} scores")
    return perm[:n_cal], perm[n_cal:]


def evaluate(scores_inlier, scores_outlier, method: str = "", threshold: Optional[float] = None,
             calibration_fraction: float = 0.2, n_bootstrap: int = 1000, seed: int = 0) -> EvalReport:
    """AUC over all scores; accuracy/F1 at a threshold chosen on a calibration split.

    With ``threshold`` given, no calibration split is taken and every score
    contributes to accuracy and F1. Confidence intervals are 95% percentile
    bootstrap intervals from stratified resampling.
    """
    si = np.asarray(scores_inlier, dtype=np.float64).ravel()
    so = np.asarray(scores_outlier, dtype=np.float64).ravel()
    if len(si) == 0 or len(so) == 0:
        raise ValueError("both score sets must be non-empty")
    rng = np.random.default_rng(seed)
    if threshold is None:
        ci, ri = _calibration_split(len(si), calibration_fraction, rng)
        co, ro = _calibration_split(len(so), calibration_fraction, rng)
        threshold = balanced_threshold(si[ci], so[co])
        rule = f"max balanced accuracy on a {calibration_fraction:.0%} calibration split"
        rep_i, rep_o = si[ri], so[ro]
    else:
        rule = "fixed"
        rep_i, rep_o = si, so
    auc = rank_auc(si, so)
    acc, f1 = accuracy_f1(rep_i, rep_o, threshold)

    boot_auc = np.empty(n_bootstrap)
    boot_acc = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        boot_auc[b] = rank_auc(si[rng.integers(0, len(si), len(si))], so[rng.integers(0, len(so), len(so))])
        boot_acc[b] = accuracy_f1(rep_i[rng.integers(0, len(rep_i), len(rep_i))],
                                  rep_o[rng.integers(0, len(rep_o), len(rep_o))], threshold)[0]

    def interval(samples, point):
        lo, hi = np.percentile(samples, [2.5, 97.5])
        return (float(min(lo, point)), float(max(hi, point)))

    return EvalReport(method, auc, interval(boot_auc, auc), acc, interval(boot_acc, acc), f1, threshold, rule,
                      si, so, seed, n_bootstrap)


def method_code(model_name: str, source: str, detector: str) -> str:
    """First letter of model, embedding tap and detector, e.g. IDO."""
    src = {"q": "Q", "conv": "C", "dense": "D"}[source.lower()]
    det = {"ocsvm": "O", "lof": "L"}[detector.lower()]
    return model_name[:1].upper() + src + det


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class AnomalyResult:
    report: EvalReport
    test_scores: np.ndarray
    predicted_outlier: np.ndarray
    whitening: WhiteningTransform
    detector: object


def run_pipeline(models: M.Models, train_images, test_images, test_is_outlier, source: str = "dense",
                 detector: str = "ocsvm", nu: float = 0.5, gamma: Optional[float] = None, k: int = 20,
                 seed: int = 0, max_train: Optional[int] = 2000, model_name: str = "InfoStyleGAN") -> AnomalyResult:
    """Embed, whiten on inliers, fit the detector on inliers only, score and evaluate the test set."""
    detector = detector.lower()
    if detector not in DETECTORS:
        raise ValueError(f"unknown detector {detector!r}; expected one of {DETECTORS}")
    test_is_outlier = np.asarray(test_is_outlier, dtype=bool)
    rng = np.random.default_rng(seed)
    if max_train is not None and len(train_images) > max_train:
        train_images = train_images[np.sort(rng.choice(len(train_images), max_train, replace=False))]
    emb_train = extract_embeddings(models, train_images, source)
    emb_test = extract_embeddings(models, test_images, source)
    white = fit_whitening(emb_train)
    wt, ws = white(emb_train), white(emb_test)
    if detector == "ocsvm":
        det = ocsvm_fit(wt, nu, gamma)
        scores = ocsvm_score(det, ws)
    else:
        det = lof_fit(wt, k)
        scores = lof_score(det, ws)
    report = evaluate(scores[~test_is_outlier], scores[test_is_outlier],
                      method_code(model_name, source, detector), seed=seed)
    return AnomalyResult(report, scores, scores < report.threshold, white, det)


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def write_roc_csv(report: EvalReport, path) -> None:
    fpr, tpr = roc_curve(report.scores_inlier, report.scores_outlier)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("fpr", "tpr"))
        for a, b in zip(fpr, tpr):
            w.writerow((repr(float(a)), repr(float(b))))


def confusion_grid(images, is_outlier, predicted_outlier, path=None, per_quadrant: int = 9,
                   seed: int = 0) -> np.ndarray:
    """2x2 montage: rows ground truth (inlier, outlier), columns prediction (inlier, outlier).

    Each quadrant shows up to ``per_quadrant`` (at most 9) seeded examples as
    a 3x3 block of tiles; all tiles are separated by 2-px gaps. When ``path``
    is given the montage is written as ``path`` (.pgm) plus a PNG next to it.
    """
    images = np.asarray(images)
    truth = np.asarray(is_outlier, dtype=bool)
    pred = np.asarray(predicted_outlier, dtype=bool)
    if not (len(images) == len(truth) == len(pred)):
        raise ValueError("images, labels and predictions must have the same length")
    per_quadrant = min(per_quadrant, 9)
    rng = np.random.default_rng(seed)
    blocks = {}
    for t in (False, True):
        for p in (False, True):
            idx = np.flatnonzero((truth == t) & (pred == p))
            if len(idx) > per_quadrant:
                idx = np.sort(rng.choice(idx, per_quadrant, replace=False))
            blocks[t, p] = list(images[idx])
    tiles = []
    # interleave the four 3x3 blocks into one 6x6 tile grid
    for row in range(6):
        t = row >= 3
        for col in range(6):
            p = col >= 3
            k = (row % 3) * 3 + col % 3
            blk = blocks[t, p]
            tiles.append(blk[k] if k < len(blk) else np.zeros(images.shape[-2:]))
    montage = imaging.tile(tiles, 6, 6)
    if path is not None:
        imaging.save_image(path, montage)
    return montage
