"""Dynamic loss-gate and label correction.

A two-component 1-D Gaussian mixture is fit (EM) to the per-sample loss
histogram each epoch; the weighted-density intersection between the two
means becomes the reliability gate.  Samples below the gate keep their
pseudo label; samples above it either get the model's sharpened posterior
as a soft target (when confident) or are excluded from the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericsError

VARIANCE_FLOOR = 1e-8


@dataclass
class LossTrace:
    """Exponential moving average of per-sample losses across epochs."""

    decay: float = 0.9
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise DataError(f"EMA decay must lie in [0, 1), got {self.decay}")

    def update(self, name: str, loss: float):
        if not math.isfinite(loss) or loss < 0:
            raise DataError(f"per-sample loss for {name!r} must be finite and >= 0")
        if name in self.values:
            self.values[name] = self.decay * self.values[name] + (1.0 - self.decay) * loss
        else:
            self.values[name] = float(loss)

    def update_batch(self, names, losses):
        for name, loss in zip(names, losses):
            self.update(name, float(loss))

    def __len__(self):
        return len(self.values)


@dataclass
class GateModel:
    weights: np.ndarray     # mixing proportions, sum to 1
    means: np.ndarray       # ordered mu_1 <= mu_2
    variances: np.ndarray
    log_likelihood: float
    ll_history: list = field(default_factory=list)
    floored: bool = False
    n_iter: int = 0

    @property
    def threshold(self) -> float:
        return gate_threshold(self)


def fit_loss_gmm(losses, seed=None, max_iter: int = 200, tol: float = 1e-8,
                 variance_floor: float = VARIANCE_FLOOR) -> GateModel:
    """EM fit of a 2-component Gaussian mixture to 1-D loss values.

    Initialization is deterministic (means at the 10th/90th percentiles,
    equal weights, pooled variance), so `seed` is accepted only for
    signature stability.  Log-likelihood is asserted non-decreasing each
    iteration; variances collapsing below the floor are clamped and flagged.
    """
    x = np.asarray(losses, dtype=np.float64).reshape(-1)
    n = x.size
    if n < 4:
        raise DataError(f"GMM fit needs at least 4 values, got {n}")
    if not np.all(np.isfinite(x)):
        raise DataError("loss values must be finite")
    if np.ptp(x) == 0:
        raise DataError("degenerate input: all loss values are equal")

    mu = np.percentile(x, [10.0, 90.0]).astype(np.float64)
    if mu[0] == mu[1]:
        mu = np.array([x.min(), x.max()], dtype=np.float64)
    pi = np.array([0.5, 0.5])
    var = np.full(2, max(float(x.var()), variance_floor))
    floored = False

    ll_history: list[float] = []
    prev_ll = -np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        # E step in the log domain
        log_pdf = (-0.5 * np.log(2.0 * np.pi * var)[None, :]
                   - (x[:, None] - mu[None, :]) ** 2 / (2.0 * var)[None, :])
        log_joint = np.log(pi)[None, :] + log_pdf
        m = log_joint.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(log_joint - m).sum(axis=1))
        ll = float(log_norm.sum())
        if ll_history and ll < prev_ll - 1e-9 * max(1.0, abs(prev_ll)):
            raise NumericsError(f"EM log-likelihood decreased: {prev_ll} -> {ll}")
        ll_history.append(ll)
        if np.isfinite(prev_ll) and abs(ll - prev_ll) <= tol * (1.0 + abs(ll)):
            break
        prev_ll = ll

        # M step
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        pi = nk / n
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk
        if np.any(var < variance_floor):
            var = np.maximum(var, variance_floor)
            floored = True

    if mu[0] > mu[1]:
        mu, var, pi = mu[::-1].copy(), var[::-1].copy(), pi[::-1].copy()
    return GateModel(pi, mu, var, ll_history[-1], ll_history, floored, iterations)


def gate_threshold(model: GateModel) -> float:
    """Weighted-density intersection between the component means.

    Solves pi_1 N(t|mu_1,var_1) = pi_2 N(t|mu_2,var_2) for t in [mu_1, mu_2];
    the midpoint is the fallback when no root lands in the interval.
    Samples with loss <= t count as reliable.
    """
    (pi1, pi2), (mu1, mu2), (v1, v2) = model.weights, model.means, model.variances
    mid = 0.5 * (mu1 + mu2)
    if mu1 == mu2:
        return float(mu1)
    d = math.log(pi1 / pi2) + 0.5 * math.log(v2 / v1)
    a = 0.5 / v2 - 0.5 / v1
    b = mu1 / v1 - mu2 / v2
    c = mu2 ** 2 / (2.0 * v2) - mu1 ** 2 / (2.0 * v1) + d
    if abs(a) < 1e-300:
        if b == 0:
            return float(mid)
        root = -c / b
        return float(root) if mu1 <= root <= mu2 else float(mid)
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return float(mid)
    sq = math.sqrt(disc)
    roots = sorted(((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)))
    inside = [r for r in roots if mu1 <= r <= mu2]
    return float(inside[0]) if inside else float(mid)


@dataclass
class CorrectionConfig:
    confidence: float = 0.5   # posterior mass needed to correct instead of drop
    temperature: float = 0.5  # sharpening temperature for the posterior
    ema_decay: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise DataError(f"confidence must lie in (0, 1), got {self.confidence}")
        if not self.temperature > 0:
            raise DataError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise DataError(f"EMA decay must lie in [0, 1), got {self.ema_decay}")


@dataclass
class CorrectionResult:
    names: list
    targets: np.ndarray   # (n, C) rows sum to 1
    weights: np.ndarray   # (n,) 0 excludes the sample
    reliable: list
    corrected: list
    excluded: list

    @property
    def reliable_fraction(self) -> float:
        return len(self.reliable) / max(1, len(self.names))


def _sharpened_posterior(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def select_and_correct(losses, model: GateModel, logits: dict, pseudo: dict,
                       cfg: CorrectionConfig) -> CorrectionResult:
    """Gate samples by loss and build their training target distributions.

    loss <= gate: one-hot pseudo label.  Above the gate: the sharpened
    posterior becomes the target when its max is at least cfg.confidence,
    otherwise the sample is excluded (weight 0).
    """
    values = losses.values if isinstance(losses, LossTrace) else dict(losses)
    tau = gate_threshold(model)
    if logits:
        num_classes = len(next(iter(logits.values())))
    else:
        num_classes = max(pseudo.values()) + 1

    names = list(values.keys())
    targets = np.zeros((len(names), num_classes))
    weights = np.ones(len(names))
    reliable, corrected, excluded = [], [], []
    for i, name in enumerate(names):
        if name not in pseudo:
            raise DataError(f"no pseudo label for sample {name!r}")
        if values[name] <= tau:
            targets[i, pseudo[name]] = 1.0
            reliable.append(name)
            continue
        if name not in logits:
            raise DataError(f"missing logits for gated sample {name!r}")
        post = _sharpened_posterior(logits[name], cfg.temperature)
        targets[i] = post
        if post.max() >= cfg.confidence:
            corrected.append(name)
        else:
            weights[i] = 0.0
            excluded.append(name)
    emitted = weights > 0
    if emitted.any():
        assert np.all(np.abs(targets[emitted].sum(axis=1) - 1.0) <= 1e-9)
    return CorrectionResult(names, targets, weights, reliable, corrected, excluded)


def gate_diagnostics(model: GateModel, result: CorrectionResult | None = None) -> str:
    """One key=value line per epoch for the trainer log."""
    parts = [f"mu1={model.means[0]:.6g}", f"mu2={model.means[1]:.6g}",
             f"tau={model.threshold:.6g}"]
    if result is not None:
        parts.append(f"reliable_fraction={result.reliable_fraction:.6g}")
    return " ".join(parts)
