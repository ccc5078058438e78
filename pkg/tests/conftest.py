"""Shared test fixtures: independent metric oracles and loss-instance
generators.

The EER/minDCF oracle is a deliberate brute force: enumerate every midpoint
threshold, count misses and false alarms by scanning all scores (O(n^2)),
and for EER take the best equal-error point achievable by mixing any two
operating points.  It never touches the production sweep or hull code.
"""

import numpy as np
import pytest

from svkit.losses import ClassifierHead, LossConfig


# ---------------------------------------------------------------------------
# brute-force metric oracle
# ---------------------------------------------------------------------------

def oracle_operating_points(scores, labels01):
    """(fa, miss) at every midpoint threshold plus accept-all / reject-all."""
    scores = np.asarray(scores, dtype=np.float64)
    labels01 = np.asarray(labels01)
    uniq = np.unique(scores)
    thresholds = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0,
                                 [uniq[-1] + 1.0]])
    tar = scores[labels01 == 1]
    non = scores[labels01 == 0]
    accept_non = (non[None, :] > thresholds[:, None]).sum(axis=1)
    accept_tar = (tar[None, :] > thresholds[:, None]).sum(axis=1)
    fa = accept_non / len(non)
    miss = 1.0 - accept_tar / len(tar)
    return fa, miss


def oracle_eer(scores, labels01) -> float:
    """Best equal-error value over all single thresholds and all two-threshold
    mixtures (the randomized-rule optimum)."""
    fa, miss = oracle_operating_points(scores, labels01)
    g = miss - fa
    best = np.inf
    exact = np.abs(g) == 0.0
    if exact.any():
        best = float(fa[exact].min())
    gi, gj = g[:, None], g[None, :]
    fi, fj = fa[:, None], fa[None, :]
    crossing = (gi > 0) & (gj < 0)
    if crossing.any():
        with np.errstate(invalid="ignore", divide="ignore"):
            t = gi / (gi - gj)
            v = fi + t * (fj - fi)
        best = min(best, float(v[crossing].min()))
    return best if np.isfinite(best) else 0.5


def oracle_mindcf(scores, labels01, p_target=0.05, c_miss=1.0, c_fa=1.0) -> float:
    fa, miss = oracle_operating_points(scores, labels01)
    cost = c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def random_score_set(rng, max_n=2000):
    """Labeled random scores with both classes present."""
    n = int(rng.integers(10, max_n + 1))
    n_tar = int(rng.integers(1, n))
    labels = np.zeros(n, dtype=int)
    labels[:n_tar] = 1
    rng.shuffle(labels)
    sep = rng.uniform(0.0, 2.0)
    scores = rng.standard_normal(n) + sep * labels
    return scores, labels


# ---------------------------------------------------------------------------
# tie-free margin-loss instances
# ---------------------------------------------------------------------------

# Coordinates whose true gradient falls in this band cannot be resolved to
# 1e-4 relative by float64 central differences when their local curvature is
# O(1): the truncation error does not scale down with the gradient.  Exact
# zeros (locally constant coordinates) below the band are fine.
_GRAD_BAND = (1e-9, 5e-5)


def _in_danger_band(*arrays) -> bool:
    for a in arrays:
        mags = np.abs(np.asarray(a, dtype=np.float64)).ravel()
        if np.any((mags > _GRAD_BAND[0]) & (mags < _GRAD_BAND[1])):
            return True
    return False


def margin_instance(rng, n=8, classes=10, subcenters=3, dim=6, margin_type="aam",
                    intertopk_penalty=0.06, intertopk_k=5, gap=5e-3):
    """Random loss instance resampled until every selection (subcenter max,
    top-k boundary, aam fallback branch) has a safe margin and no gradient
    coordinate falls where float64 central differences cannot resolve it,
    so the check sees a locally smooth, well-conditioned function."""
    from svkit.losses import margin_softmax_loss

    while True:
        scale = float(rng.uniform(2.0, 5.0))
        margin = float(rng.uniform(0.05, 0.4))
        emb = rng.standard_normal((n, dim))
        labels = rng.integers(0, classes, n)
        head = ClassifierHead.init_random(classes, subcenters, dim, rng)
        cfg = LossConfig(margin_type=margin_type, scale=scale, margin=margin,
                         subcenters=subcenters, intertopk_penalty=intertopk_penalty,
                         intertopk_k=intertopk_k)
        e_unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        w = head.weights.reshape(classes * subcenters, dim)
        w_unit = w / np.linalg.norm(w, axis=1, keepdims=True)
        cos = (e_unit @ w_unit.T).reshape(n, classes, subcenters)
        if subcenters > 1:
            top2 = np.sort(cos, axis=2)
            if (top2[:, :, -1] - top2[:, :, -2]).min() < gap:
                continue
        cmax = cos.max(axis=2)
        masked = cmax.copy()
        masked[np.arange(n), labels] -= 3.0
        order = np.sort(masked, axis=1)
        if intertopk_penalty > 0 and (order[:, -intertopk_k] -
                                      order[:, -intertopk_k - 1]).min() < gap:
            continue
        tc = cmax[np.arange(n), labels]
        if np.abs(tc).max() > 0.98:
            continue
        if margin_type == "aam" and np.abs(tc - np.cos(np.pi - margin)).min() < gap:
            continue
        bundle = margin_softmax_loss(emb, labels, head, cfg)
        if _in_danger_band(bundle.grad_emb, bundle.grad_weights):
            continue
        return emb, labels, head, cfg


def apl_instance(rng, n=6, dim=6):
    """Random prototypical batch; the bias is checked algebraically (its exact
    gradient is zero), so only batch and scale gradients need conditioning."""
    from svkit.losses import angular_prototypical_loss

    while True:
        batch = rng.standard_normal((n, 2, dim))
        w = float(rng.uniform(2.0, 6.0))
        b = float(rng.uniform(-6.0, 2.0))
        bundle = angular_prototypical_loss(batch, w, b)
        if _in_danger_band(bundle.grad_emb, bundle.grad_w):
            continue
        return batch, w, b


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)
