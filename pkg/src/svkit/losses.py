"""Training objectives with exact analytic gradients.

Margin softmax (additive-angle or additive-cosine) with K-subcenter class
weights and an inter-top-k penalty on the hardest non-target classes; the
self-supervised angular prototypical loss; and the joint source+target
objective L = L_source + L_target used for domain adaptation.

No autodiff framework is involved: every loss returns a GradBundle holding
the exact gradient with respect to its raw (unnormalized) inputs, with the
subcenter argmax and top-k selections treated as locally constant
(subgradient at ties, ties broken by lowest index).  finite_diff_check
verifies any of these against central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

JOINT_MODES = ("APL", "TCL", "OCL")

_NORM_TINY = 1e-12


@dataclass
class LossConfig:
    """Margin-loss hyperparameters (stage-I online defaults)."""

    margin_type: str = "aam"  # "aam": s*cos(theta+m); "am": s*(cos(theta)-m)
    scale: float = 32.0
    margin: float = 0.2
    subcenters: int = 3
    intertopk_penalty: float = 0.06
    intertopk_k: int = 5

    def __post_init__(self):
        if self.margin_type not in ("aam", "am"):
            raise ConfigError(f"margin type must be 'aam' or 'am', got {self.margin_type!r}")
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.margin_type == "aam" and not self.margin < math.pi / 2:
            raise ConfigError(f"aam margin must be < pi/2, got {self.margin}")
        if self.subcenters < 1:
            raise ConfigError(f"subcenter count must be >= 1, got {self.subcenters}")
        if self.intertopk_penalty < 0:
            raise ConfigError(f"intertopk penalty must be >= 0, got {self.intertopk_penalty}")
        if self.intertopk_k < 1:
            raise ConfigError(f"intertopk k must be >= 1, got {self.intertopk_k}")


def large_margin_config(cfg: LossConfig) -> LossConfig:
    """Stage-II fine-tuning variant: raised margin, inter-top-k removed."""
    return replace(cfg, margin=0.5 if cfg.margin_type == "aam" else 0.35,
                   intertopk_penalty=0.0)


@dataclass
class ClassifierHead:
    weights: np.ndarray  # (C, K, D)
    head_id: str = "source"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise DataError(f"head weights must be (C, K, D), got shape {self.weights.shape}")
        if self.head_id not in ("source", "target"):
            raise DataError(f"head id must be 'source' or 'target', got {self.head_id!r}")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init_random(cls, num_classes: int, subcenters: int, dim: int, rng,
                    head_id: str = "source") -> "ClassifierHead":
        w = rng.standard_normal((num_classes, subcenters, dim)) / np.sqrt(dim)
        return cls(w, head_id)


@dataclass
class GradBundle:
    loss: float
    per_sample: np.ndarray                 # (N,) unweighted cross-entropy per sample
    grad_emb: np.ndarray                   # gradient wrt the raw input embeddings
    grad_weights: np.ndarray | None = None  # wrt head weights (C, K, D)
    grad_logits: np.ndarray | None = None   # wrt scaled logits (N, C); diagnostics
    grad_w: float | None = None             # angular-prototypical scale
    grad_b: float | None = None             # angular-prototypical bias


def _normalize_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms <= 0):
        raise DataError(f"zero-norm {what} at index {int(np.argmin(norms))}")
    return x / norms[..., None], norms


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def margin_softmax_loss(emb: np.ndarray, labels: np.ndarray, head: ClassifierHead,
                        cfg: LossConfig, soft_targets: np.ndarray | None = None,
                        sample_weights: np.ndarray | None = None) -> GradBundle:
    """Margin softmax cross-entropy over cosine logits, with gradients.

    Per class the cosine is the max over the K subcenters.  The target logit
    gets the margin (cos(theta+m) for aam with the standard linearized
    fallback past theta+m = pi, cos(theta)-m for am); the intertopk_k hardest
    non-target cosines get +intertopk_penalty before scaling.  Embeddings and
    class weights are length-normalized in here, not by the caller.

    soft_targets replaces the one-hot target distribution in the
    cross-entropy (the margin still keys off `labels`); sample_weights
    reweights the batch mean, with weight 0 excluding a sample.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    N, D = emb.shape
    C, K, Dw = head.weights.shape
    if Dw != D:
        raise DataError(f"embedding dim {D} does not match head dim {Dw}")
    if labels.shape != (N,):
        raise DataError(f"expected {N} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise DataError(f"label out of range [0, {C})")
    if K != cfg.subcenters:
        raise DataError(f"head has {K} subcenters but config says {cfg.subcenters}")

    E, norms_x = _normalize_rows(emb, "embedding")
    w_flat = head.weights.reshape(C * K, D)
    Wn_flat, norms_w = _normalize_rows(w_flat, "class weight")

    cos_sub = (E @ Wn_flat.T).reshape(N, C, K)
    kstar = np.argmax(cos_sub, axis=2)  # first index wins at ties
    cos = np.take_along_axis(cos_sub, kstar[:, :, None], axis=2)[:, :, 0]

    rows = np.arange(N)
    tc = cos[rows, labels]

    if cfg.margin_type == "aam":
        cos_m, sin_m = math.cos(cfg.margin), math.sin(cfg.margin)
        sin_t = np.sqrt(np.maximum(0.0, 1.0 - tc ** 2))
        main = tc * cos_m - sin_t * sin_m
        fallback_at = math.cos(math.pi - cfg.margin)
        in_main = tc >= fallback_at
        phi = np.where(in_main, main, tc - cfg.margin * sin_m)
        phi_grad = np.where(in_main,
                            cos_m + sin_m * tc / np.maximum(sin_t, _NORM_TINY), 1.0)
    else:
        phi = tc - cfg.margin
        phi_grad = np.ones(N)

    logits = cos.copy()
    topk_active = cfg.intertopk_penalty > 0.0
    if topk_active:
        if cfg.intertopk_k > C - 1:
            raise DataError(f"intertopk k={cfg.intertopk_k} needs at most C-1={C - 1}")
        masked = cos.copy()
        masked[rows, labels] -= 3.0  # push the target strictly below any cosine
        order = np.argsort(-masked, axis=1, kind="stable")
        topk = order[:, :cfg.intertopk_k]
        np.put_along_axis(logits, topk,
                          np.take_along_axis(logits, topk, axis=1) + cfg.intertopk_penalty,
                          axis=1)
    logits[rows, labels] = phi
    scaled = cfg.scale * logits

    logp = _log_softmax(scaled)
    if soft_targets is None:
        targets = np.zeros((N, C))
        targets[rows, labels] = 1.0
    else:
        targets = np.asarray(soft_targets, dtype=np.float64)
        if targets.shape != (N, C):
            raise DataError(f"soft targets shape {targets.shape} != ({N}, {C})")
        if np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-6):
            raise DataError("soft target rows must sum to 1")
    per_sample = -(targets * logp).sum(axis=1)

    if sample_weights is None:
        weights = np.ones(N)
    else:
        weights = np.asarray(sample_weights, dtype=np.float64)
        if weights.shape != (N,) or np.any(weights < 0):
            raise DataError("sample weights must be nonnegative, one per sample")
    wsum = weights.sum()
    if wsum <= 0:
        return GradBundle(0.0, per_sample, np.zeros_like(emb),
                          np.zeros_like(head.weights), np.zeros((N, C)))
    loss = float((weights * per_sample).sum() / wsum)

    # backward
    probs = np.exp(logp)
    dlogits = (probs - targets) * (weights / wsum)[:, None]
    dcos = cfg.scale * dlogits
    dcos[rows, labels] *= phi_grad

    w_sel = Wn_flat.reshape(C, K, D)[np.arange(C)[None, :], kstar]  # (N, C, D)
    g_e = np.einsum("nc,ncd->nd", dcos, w_sel)
    grad_emb = (g_e - (g_e * E).sum(axis=1, keepdims=True) * E) / norms_x[:, None]

    g_wn = np.zeros((C * K, D))
    flat_idx = (np.arange(C)[None, :] * K + kstar).ravel()
    np.add.at(g_wn, flat_idx, (dcos[:, :, None] * E[:, None, :]).reshape(-1, D))
    g_w = (g_wn - (g_wn * Wn_flat).sum(axis=1, keepdims=True) * Wn_flat) / norms_w[:, None]

    return GradBundle(loss, per_sample, grad_emb, g_w.reshape(C, K, D), dlogits)


def angular_prototypical_loss(batch: np.ndarray, w: float, b: float) -> GradBundle:
    """Angular prototypical loss on (N speakers, 2 segments, D) batches.

    Segment 0 is the prototype, segment 1 the query; similarity is
    w*cos(query_i, prototype_j) + b and the loss is mean cross-entropy with
    the matching prototype as the true class.  Gradients cover the batch and
    the learnable (w, b).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1] != 2:
        raise DataError(f"expected (N, 2, D) batch, got shape {batch.shape}")
    N = batch.shape[0]
    if N < 2:
        raise DataError("angular prototypical loss needs at least 2 speakers (no negatives)")
    if not w > 0:
        raise DataError(f"similarity scale w must be positive, got {w}")

    Pn, norms_p = _normalize_rows(batch[:, 0], "prototype")
    Qn, norms_q = _normalize_rows(batch[:, 1], "query")
    cosm = Qn @ Pn.T
    S = w * cosm + b

    logp = _log_softmax(S)
    rows = np.arange(N)
    per_sample = -logp[rows, rows]
    loss = float(per_sample.mean())

    dS = np.exp(logp)
    dS[rows, rows] -= 1.0
    dS /= N
    grad_w = float((dS * cosm).sum())
    # the shared bias shifts whole softmax rows, so its exact gradient is zero
    # (dS rows sum to zero); skip the dust-accumulating reduction
    grad_b = 0.0
    dcos = w * dS

    g_q = dcos @ Pn
    g_p = dcos.T @ Qn
    grad = np.empty_like(batch)
    grad[:, 1] = (g_q - (g_q * Qn).sum(axis=1, keepdims=True) * Qn) / norms_q[:, None]
    grad[:, 0] = (g_p - (g_p * Pn).sum(axis=1, keepdims=True) * Pn) / norms_p[:, None]

    return GradBundle(loss, per_sample, grad, grad_logits=dS, grad_w=grad_w, grad_b=grad_b)


# ---------------------------------------------------------------------------
# joint source + target objective
# ---------------------------------------------------------------------------

@dataclass
class MarginBatch:
    emb: np.ndarray
    labels: np.ndarray | None
    head: ClassifierHead | None
    cfg: LossConfig
    soft_targets: np.ndarray | None = None
    sample_weights: np.ndarray | None = None


@dataclass
class AplBatch:
    pairs: np.ndarray  # (N, 2, D)
    w: float = 10.0
    b: float = -5.0


@dataclass
class JointBundle:
    loss: float
    loss_source: float
    loss_target: float
    source: GradBundle
    target: GradBundle | None
    mode: str


def joint_loss(source: MarginBatch, target, mode: str,
               n_source_classes: int | None = None) -> JointBundle:
    """L = L_source + L_target; `mode` picks the target-domain objective.

    APL expects an AplBatch of same-utterance segment pairs; TCL a
    MarginBatch with its own classification head and pseudo labels; OCL a
    MarginBatch without a head: target samples share the source head, with
    class indices offset by n_source_classes.  target=None disables
    adaptation and returns the source loss unchanged.
    """
    if mode not in JOINT_MODES:
        raise ConfigError(f"joint mode must be one of {JOINT_MODES}, got {mode!r}")
    if source.emb.shape[0] == 0:
        raise DataError("source batch is empty")
    src = margin_softmax_loss(source.emb, source.labels, source.head, source.cfg,
                              source.soft_targets, source.sample_weights)
    if target is None:
        return JointBundle(src.loss, src.loss, 0.0, src, None, mode)

    if mode == "APL":
        if not isinstance(target, AplBatch):
            raise DataError("APL mode expects an AplBatch of segment pairs")
        tgt = angular_prototypical_loss(target.pairs, target.w, target.b)
    else:
        if not isinstance(target, MarginBatch):
            raise DataError(f"{mode} mode expects a MarginBatch")
        if target.labels is None:
            raise DataError(f"mode {mode} requires pseudo labels for the target batch")
        if mode == "TCL":
            if target.head is None:
                raise DataError("TCL mode requires a separate target head")
            tgt = margin_softmax_loss(target.emb, target.labels, target.head, target.cfg,
                                      target.soft_targets, target.sample_weights)
        else:  # OCL: shared head, offset class range
            if n_source_classes is None:
                raise ConfigError("OCL mode requires n_source_classes for the label offset")
            labels = np.asarray(target.labels) + n_source_classes
            soft = target.soft_targets
            if soft is not None:
                # distributions live on the target class range; embed past the sources
                wide = np.zeros((soft.shape[0], source.head.num_classes))
                wide[:, n_source_classes:n_source_classes + soft.shape[1]] = soft
                soft = wide
            tgt = margin_softmax_loss(target.emb, labels, source.head, target.cfg,
                                      soft, target.sample_weights)

    return JointBundle(src.loss + tgt.loss, src.loss, tgt.loss, src, tgt, mode)


def class_cosines(emb: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """Subcenter-max cosine per class, (N, C).  Forward only; used for
    posterior estimates (label correction) and diagnostics."""
    emb = np.asarray(emb, dtype=np.float64)
    C, K, D = head.weights.shape
    E, _ = _normalize_rows(emb, "embedding")
    Wn, _ = _normalize_rows(head.weights.reshape(C * K, D), "class weight")
    return (E @ Wn.T).reshape(-1, C, K).max(axis=2)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(loss_op, params: dict, eps: float = 1e-4) -> float:
    """Central-difference check of analytic gradients.

    loss_op maps a dict of float arrays to (loss, grads-dict with the same
    keys).  Returns the max over all coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_op(params)
    worst = 0.0
    for key, base in params.items():
        grad = np.asarray(grads[key], dtype=np.float64)
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi, _ = loss_op(params)
            flat[idx] = orig - eps
            lo, _ = loss_op(params)
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            analytic = grad.reshape(-1)[idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
