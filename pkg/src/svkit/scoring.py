"""Trial scoring and evaluation: cosine scores, adaptive score normalization,
logistic calibration, fusion, and EER / minDCF metrics.

EER is computed on the ROC convex hull (the equal-error point achievable by
interpolating between operating points); minDCF minimizes the normalized
detection cost over the actual threshold operating points.  Both are
invariant under any strictly increasing transform of the scores.  tests/
carry an independent O(n^2) threshold-sweep oracle for both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EmbeddingSet, ScoreSet, TrialList
from .errors import DataError, NumericsError


# ---------------------------------------------------------------------------
# cosine trial scoring
# ---------------------------------------------------------------------------

def _unit(v: np.ndarray, name: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n <= 0:
        raise DataError(f"zero-norm embedding for {name!r}")
    return v / n


def score_trials(emb: EmbeddingSet, trials: TrialList) -> ScoreSet:
    """Cosine similarity per (enroll, test) pair, in [-1, 1]."""
    vectors = emb.vectors.astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    scores = np.empty(len(trials))
    for i, t in enumerate(trials.pairs):
        for name in (t.enroll, t.test):
            if name not in emb:
                raise DataError(f"trial {i}: no embedding named {name!r}")
        a, b = emb.index_of(t.enroll), emb.index_of(t.test)
        if norms[a] <= 0 or norms[b] <= 0:
            bad = t.enroll if norms[a] <= 0 else t.test
            raise DataError(f"zero-norm embedding for {bad!r}")
        scores[i] = vectors[a] @ vectors[b] / (norms[a] * norms[b])
    return ScoreSet(trials, scores)


# ---------------------------------------------------------------------------
# cohorts and adaptive score normalization
# ---------------------------------------------------------------------------

@dataclass
class Cohort:
    embeddings: EmbeddingSet

    @property
    def size(self) -> int:
        return len(self.embeddings)


def build_cohort(emb: EmbeddingSet, speaker_of: dict) -> Cohort:
    """One length-normalized mean embedding per speaker, in first-seen order."""
    order: list[str] = []
    groups: dict[str, list[int]] = {}
    for i, name in enumerate(emb.names):
        if name not in speaker_of:
            raise DataError(f"no speaker mapping for embedding {name!r}")
        spk = str(speaker_of[name])
        if spk not in groups:
            groups[spk] = []
            order.append(spk)
        groups[spk].append(i)
    vectors = emb.vectors.astype(np.float64)
    means = []
    for spk in order:
        mean = vectors[groups[spk]].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm <= 0:
            raise DataError(f"speaker {spk!r} has a zero mean embedding")
        means.append(mean / norm)
    return Cohort(EmbeddingSet(order, np.array(means), dim=emb.dim))


def as_norm(raw: ScoreSet, emb: EmbeddingSet, cohort: Cohort, top_n: int = 600) -> ScoreSet:
    """Adaptive score normalization against an imposter cohort.

    Each trial score s(e, t) is z-normalized on both sides by the mean and
    std of the top_n largest cohort scores of e and of t:
    0.5 * ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t).
    """
    if top_n < 1:
        raise DataError(f"top_n must be >= 1, got {top_n}")
    if top_n > cohort.size:
        raise DataError(f"top_n={top_n} exceeds cohort size {cohort.size}")
    cohort_vecs = cohort.embeddings.vectors.astype(np.float64)
    cohort_norms = np.linalg.norm(cohort_vecs, axis=1)
    if np.any(cohort_norms <= 0):
        raise DataError("cohort contains a zero-norm vector")
    cohort_unit = cohort_vecs / cohort_norms[:, None]

    stats: dict[str, tuple[float, float]] = {}

    def side_stats(name: str) -> tuple[float, float]:
        if name not in stats:
            v = _unit(emb.vector(name).astype(np.float64), name)
            cs = cohort_unit @ v
            top = cs if top_n == cs.size else np.partition(cs, cs.size - top_n)[-top_n:]
            mu = float(top.mean())
            sigma = float(top.std())
            if sigma <= 0:
                raise NumericsError(f"constant cohort scores for {name!r}: zero variance")
            stats[name] = (mu, sigma)
        return stats[name]

    out = np.empty(len(raw.pairs))
    for i, (t, s) in enumerate(zip(raw.pairs.pairs, raw.scores)):
        mu_e, sig_e = side_stats(t.enroll)
        mu_t, sig_t = side_stats(t.test)
        out[i] = 0.5 * ((s - mu_e) / sig_e + (s - mu_t) / sig_t)
    return ScoreSet(raw.pairs, out)


# ---------------------------------------------------------------------------
# logistic calibration and fusion
# ---------------------------------------------------------------------------

@dataclass
class CalibrationModel:
    weights: np.ndarray  # [bias, score coefficient, quality coefficients...]
    degenerate: bool = False

    @property
    def num_quality(self) -> int:
        return len(self.weights) - 2


def _fit_logistic(X: np.ndarray, y01: np.ndarray, ridge: float = 1e-6,
                  tol: float = 1e-8, max_iter: int = 500) -> np.ndarray:
    """Prior-weighted (effective prior 0.5) logistic regression, damped Newton.

    Column 0 of X must be the intercept; the ridge penalty spares it.  The
    class weighting makes the fitted linear score a log-likelihood ratio.
    Deterministic; raises NumericsError if the gradient norm will not reach
    tol within max_iter.
    """
    n_tar = int(y01.sum())
    n_non = len(y01) - n_tar
    if n_tar == 0 or n_non == 0:
        raise DataError("calibration needs both target and nontarget trials")
    omega = np.where(y01 == 1, 0.5 / n_tar, 0.5 / n_non)
    mask = np.ones(X.shape[1])
    mask[0] = 0.0  # no penalty on the bias

    def objective(theta):
        z = X @ theta
        # log(1 + exp(-y'z)) written stably
        yz = np.where(y01 == 1, z, -z)
        return float(omega @ np.logaddexp(0.0, -yz) + 0.5 * ridge * np.sum((mask * theta) ** 2))

    theta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        z = X @ theta
        p = 1.0 / (1.0 + np.exp(-z))
        grad = X.T @ (omega * (p - y01)) + ridge * mask * theta
        if np.linalg.norm(grad) <= tol:
            return theta
        hess = (X.T * (omega * p * (1.0 - p))) @ X + ridge * np.diag(mask)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        j0 = objective(theta)
        descent = float(grad @ step)
        t = 1.0
        for _ in range(60):
            if objective(theta - t * step) <= j0 - 1e-4 * t * descent:
                break
            t *= 0.5
        theta = theta - t * step
    raise NumericsError(f"logistic fit did not reach gradient norm {tol} "
                        f"within {max_iter} iterations")


def _quality_matrix(quality, n: int) -> np.ndarray:
    """Quality features arrive as real[q][#pairs]; returns (n, q)."""
    if quality is None:
        return np.empty((n, 0))
    q = np.atleast_2d(np.asarray(quality, dtype=np.float64))
    if q.shape[1] != n:
        raise DataError(f"quality features have {q.shape[1]} columns, expected {n}")
    return q.T


def train_calibration(scores: ScoreSet, quality=None, ridge: float = 1e-6) -> CalibrationModel:
    """Fit an affine (plus optional quality features) map to LLR scale."""
    if not scores.pairs.labeled:
        raise DataError("calibration requires labeled trials")
    y = scores.pairs.labels01().astype(np.float64)
    Q = _quality_matrix(quality, len(scores.scores))
    X = np.column_stack([np.ones(len(scores.scores)), scores.scores, Q])
    theta = _fit_logistic(X, y, ridge=ridge)
    return CalibrationModel(theta, degenerate=abs(theta[1]) < 1e-3)


def apply_calibration(model: CalibrationModel, raw: ScoreSet, quality=None) -> ScoreSet:
    Q = _quality_matrix(quality, len(raw.scores))
    if Q.shape[1] != model.num_quality:
        raise DataError(f"model expects {model.num_quality} quality feature(s), "
                        f"got {Q.shape[1]}")
    X = np.column_stack([np.ones(len(raw.scores)), raw.scores, Q])
    return ScoreSet(raw.pairs, X @ model.weights)


def _check_same_pairs(sets: list[ScoreSet]):
    ref = [(t.enroll, t.test) for t in sets[0].pairs.pairs]
    for i, s in enumerate(sets[1:], start=2):
        if [(t.enroll, t.test) for t in s.pairs.pairs] != ref:
            raise DataError(f"score set {i} has a different trial list")


def learn_fusion_weights(sets: list[ScoreSet], ridge: float = 1e-6) -> np.ndarray:
    """Logistic-regression fusion weights [bias, w_1..w_n] from labeled sets."""
    _check_same_pairs(sets)
    if not sets[0].pairs.labeled:
        raise DataError("learned fusion requires labeled trials")
    y = sets[0].pairs.labels01().astype(np.float64)
    X = np.column_stack([np.ones(len(y))] + [s.scores for s in sets])
    return _fit_logistic(X, y, ridge=ridge)


def fuse_scores(sets: list[ScoreSet], weights="equal") -> ScoreSet:
    """Scorewise weighted mean; weights='learn' fits them by logistic regression."""
    if not sets:
        raise DataError("no score sets to fuse")
    _check_same_pairs(sets)
    if isinstance(weights, str) and weights == "learn":
        theta = learn_fusion_weights(sets)
        X = np.column_stack([np.ones(len(sets[0].scores))] + [s.scores for s in sets])
        return ScoreSet(sets[0].pairs, X @ theta)
    if isinstance(weights, str) and weights == "equal":
        weights = np.ones(len(sets))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(sets),):
        raise DataError(f"expected {len(sets)} fusion weights, got shape {w.shape}")
    if np.any(w < 0) or w.sum() <= 0:
        raise DataError("fusion weights must be nonnegative and not all zero")
    w = w / w.sum()
    fused = np.zeros_like(sets[0].scores)
    for wi, s in zip(w, sets):
        fused += wi * s.scores
    return ScoreSet(sets[0].pairs, fused)


# ---------------------------------------------------------------------------
# EER and minDCF
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    eer: float
    min_dcf: float
    threshold_at_eer: float
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def as_text(self) -> str:
        return f"EER={100.0 * self.eer:.4f}% minDCF={self.min_dcf:.6f}"

    def as_keyvalues(self) -> str:
        return (f"eer={self.eer:.17g}\nmin_dcf={self.min_dcf:.17g}\n"
                f"threshold_at_eer={self.threshold_at_eer:.17g}\n"
                f"p_target={self.p_target:.17g}\nc_miss={self.c_miss:.17g}\n"
                f"c_fa={self.c_fa:.17g}\n")


def _operating_points(scores: np.ndarray, labels01: np.ndarray):
    """(fa, miss, threshold) arrays over all decision cuts, accept-none first."""
    scores = np.asarray(scores, dtype=np.float64)
    labels01 = np.asarray(labels01)
    n = len(scores)
    n_tar = int(labels01.sum())
    n_non = n - n_tar
    if n_tar == 0 or n_non == 0:
        raise DataError("metrics need both target and nontarget trials")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels01[order]
    cum_tar = np.concatenate([[0], np.cumsum(l_sorted)])
    cut_ok = np.concatenate([[True], s_sorted[:-1] > s_sorted[1:], [True]])
    cuts = np.nonzero(cut_ok)[0]
    fa = (cuts - cum_tar[cuts]) / n_non
    miss = (n_tar - cum_tar[cuts]) / n_tar
    thr = np.empty(len(cuts))
    for j, i in enumerate(cuts):
        if i == 0:
            thr[j] = s_sorted[0] + 1.0
        elif i == n:
            thr[j] = s_sorted[-1] - 1.0
        else:
            thr[j] = 0.5 * (s_sorted[i - 1] + s_sorted[i])
    return fa, miss, thr


def _roc_hull(fa: np.ndarray, miss: np.ndarray, thr: np.ndarray):
    """Upper convex hull of the ROC staircase, as (fa, miss, thr) vertices."""
    pts = sorted(zip(fa, 1.0 - miss, thr))
    hull: list[tuple[float, float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (ox, oy, _), (ax, ay, _) = hull[-2], hull[-1]
            if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    h = np.array(hull)
    return h[:, 0], 1.0 - h[:, 1], h[:, 2]


def _eer_from_points(fa: np.ndarray, miss: np.ndarray, thr: np.ndarray):
    """Crossing of miss = fa along the hull path, linearly interpolated."""
    g = miss - fa  # strictly decreasing along the hull
    for i in range(len(g) - 1):
        if g[i] >= 0 >= g[i + 1]:
            if g[i] == g[i + 1]:
                return float(fa[i]), float(thr[i])
            alpha = g[i] / (g[i] - g[i + 1])
            eer = fa[i] + alpha * (fa[i + 1] - fa[i])
            return float(eer), float(thr[i] + alpha * (thr[i + 1] - thr[i]))
    # g runs from +1 to -1, so a crossing always exists; defend anyway
    i = int(np.argmin(np.abs(g)))
    return float(0.5 * (miss[i] + fa[i])), float(thr[i])


def compute_eer(scores: ScoreSet) -> float:
    """Equal error rate at the P_miss = P_fa crossing of the ROC convex hull."""
    fa, miss, thr = _operating_points(scores.scores, scores.pairs.labels01())
    eer, _ = _eer_from_points(*_roc_hull(fa, miss, thr))
    return eer


def compute_mindcf(scores: ScoreSet, p_target: float = 0.05, c_miss: float = 1.0,
                   c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over all threshold operating points."""
    if not 0.0 < p_target < 1.0:
        raise DataError(f"p_target must lie in (0, 1), got {p_target}")
    fa, miss, _ = _operating_points(scores.scores, scores.pairs.labels01())
    cost = c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def compute_metrics(scores: ScoreSet, p_target: float = 0.05, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> MetricsReport:
    fa, miss, thr = _operating_points(scores.scores, scores.pairs.labels01())
    eer, thr_eer = _eer_from_points(*_roc_hull(fa, miss, thr))
    cost = c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa
    min_dcf = float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))
    return MetricsReport(eer, min_dcf, thr_eer, p_target, c_miss, c_fa)
