"""Desk-scale training harness on a toy affine extractor.

Covers supervised pre-training, large-margin fine-tuning (raised margin,
inter-top-k removed, longer segments), and joint source+target adaptation
with the APL / TCL / OCL objectives, optionally loss-gated (DLG-LC) for the
classification modes.  Plain SGD with an exponential learning-rate decay;
every run is bit-reproducible from (seed, config): all RNG streams derive
from (seed, purpose, epoch, batch).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import EmbeddingSet, read_matrices, write_matrices
from .errors import ConfigError, DataError, NumericsError
from .lossgate import (CorrectionConfig, LossTrace, fit_loss_gmm, gate_diagnostics,
                       gate_threshold, select_and_correct)
from .losses import (AplBatch, ClassifierHead, JointBundle, LossConfig, MarginBatch,
                     _log_softmax, class_cosines, joint_loss, margin_softmax_loss)
from .rand import derive_rng
from .synthdata import SyntheticDataset

log = logging.getLogger("svkit.training")


@dataclass
class ToyExtractor:
    """Affine embedding extractor standing in for the out-of-scope backbones."""

    projection: np.ndarray  # (D_in, D_out)
    bias: np.ndarray        # (D_out,)

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.projection.ndim != 2 or self.bias.shape != (self.projection.shape[1],):
            raise DataError("projection must be (D_in, D_out) with matching bias")
        if not (np.all(np.isfinite(self.projection)) and np.all(np.isfinite(self.bias))):
            raise DataError("extractor parameters must be finite")

    @property
    def dim_out(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def init_random(cls, d_in: int, d_out: int, rng) -> "ToyExtractor":
        return cls(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in), np.zeros(d_out))

    def embed(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.projection + self.bias

    def copy(self) -> "ToyExtractor":
        return ToyExtractor(self.projection.copy(), self.bias.copy())

    def save(self, path):
        write_matrices(path, {"projection": self.projection,
                              "bias": self.bias.reshape(1, -1)})

    @classmethod
    def load(cls, path) -> "ToyExtractor":
        mats = read_matrices(path)
        return cls(mats["projection"], mats["bias"].reshape(-1))


@dataclass
class TrainConfig:
    lr_initial: float = 0.1
    lr_final: float = 0.00005
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    segment_seconds: float = 2.0
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.lr_initial > 0 and self.lr_final > 0):
            raise ConfigError("learning rates must be positive")
        if self.lr_final > self.lr_initial:
            raise ConfigError(f"lr_final {self.lr_final} must not exceed "
                              f"lr_initial {self.lr_initial}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")


def adaptation_config(cfg: TrainConfig) -> TrainConfig:
    """Joint fine-tuning schedule: learning rates decreased to 1e-3 -> 1e-5."""
    from dataclasses import replace
    return replace(cfg, lr_initial=0.001, lr_final=0.00001)


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Exponential decay from lr_initial to lr_final across all steps."""
    if total_steps <= 1 or cfg.lr_initial == cfg.lr_final:
        return cfg.lr_initial
    frac = step / (total_steps - 1)
    return float(cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** frac)


def embed_dataset(extractor: ToyExtractor, ds: SyntheticDataset) -> EmbeddingSet:
    return EmbeddingSet(list(ds.names), extractor.embed(ds.inputs))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    source_names: list
    source_x: np.ndarray
    source_labels: np.ndarray
    target_names: list
    target_x: np.ndarray | None      # (n, D) for TCL/OCL, (n, 2, D) for APL
    target_labels: np.ndarray | None


def make_joint_batch(source_ds: SyntheticDataset, target_ds: SyntheticDataset,
                     n: int, rng, mode: str = "OCL",
                     pseudo_labels: dict | None = None) -> Batch:
    """Equal numbers of source and target samples, drawn without replacement.

    APL mode draws two segments per target utterance; classification modes
    attach pseudo labels when a mapping is supplied.
    """
    if n < 1:
        raise DataError(f"batch size must be >= 1, got {n}")
    if n > len(source_ds) or n > len(target_ds):
        raise DataError(f"batch size {n} exceeds dataset size "
                        f"({len(source_ds)} source, {len(target_ds)} target)")
    src_idx = rng.choice(len(source_ds), size=n, replace=False)
    tgt_idx = rng.choice(len(target_ds), size=n, replace=False)
    src_names = [source_ds.names[i] for i in src_idx]
    tgt_names = [target_ds.names[i] for i in tgt_idx]
    source_x = source_ds.segment(src_idx, rng)
    if mode == "APL":
        target_x = target_ds.segment_pair(tgt_idx, rng)
        target_labels = None
    else:
        target_x = target_ds.segment(tgt_idx, rng)
        target_labels = (np.array([pseudo_labels[n_] for n_ in tgt_names], dtype=np.int64)
                         if pseudo_labels is not None else None)
    return Batch(src_names, source_x, source_ds.speakers[src_idx],
                 tgt_names, target_x, target_labels)


def _epoch_chunks(n_items: int, batch: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n_items)
    return [perm[i:i + batch] for i in range(0, n_items - batch + 1, batch)]


# ---------------------------------------------------------------------------
# supervised stage I and large-margin fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    extractor: ToyExtractor
    head: ClassifierHead
    history: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"]


def _sgd_step(extractor, head, x, bundle, lr, weight_decay, extra_heads=()):
    g_proj = x.T @ bundle.grad_emb
    extractor.projection -= lr * (g_proj + weight_decay * extractor.projection)
    extractor.bias -= lr * bundle.grad_emb.sum(axis=0)
    if head is not None and bundle.grad_weights is not None:
        head.weights -= lr * (bundle.grad_weights + weight_decay * head.weights)
    for h, g in extra_heads:
        h.weights -= lr * (g + weight_decay * h.weights)


def train_supervised(extractor: ToyExtractor, data: SyntheticDataset, cfg: TrainConfig,
                     loss_cfg: LossConfig, head: ClassifierHead | None = None) -> TrainResult:
    """Stage-I pre-training: margin softmax over the labeled speakers."""
    extractor = extractor.copy()
    if head is None:
        head = ClassifierHead.init_random(data.num_speakers, loss_cfg.subcenters,
                                          extractor.dim_out, derive_rng(cfg.seed, "head"))
    else:
        head = ClassifierHead(head.weights.copy(), head.head_id)
    n_batches = max(1, len(data) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = derive_rng(cfg.seed, "supervised", epoch)
        losses = []
        for chunk in _epoch_chunks(len(data), cfg.batch_size, rng)[:n_batches]:
            x = data.segment(chunk, rng)
            emb = extractor.embed(x)
            bundle = margin_softmax_loss(emb, data.speakers[chunk], head, loss_cfg)
            if not np.isfinite(bundle.loss):
                raise NumericsError(f"training diverged at epoch {epoch} step {step}: "
                                    f"loss={bundle.loss}, lr={lr_at(cfg, step, total_steps)}")
            _sgd_step(extractor, head, x, bundle, lr_at(cfg, step, total_steps),
                      cfg.weight_decay)
            losses.append(bundle.loss)
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "lr": lr_at(cfg, step - 1, total_steps)})
        log.info("epoch=%d loss=%.6f lr=%.6g", epoch, history[-1]["loss"],
                 history[-1]["lr"])
    return TrainResult(extractor, head, history)


def finetune(extractor: ToyExtractor, head: ClassifierHead, data: SyntheticDataset,
             cfg: TrainConfig, loss_cfg: LossConfig) -> TrainResult:
    """Stage-II large-margin fine-tuning; inter-top-k must be disabled."""
    if loss_cfg.intertopk_penalty > 0:
        raise ConfigError("large-margin fine-tuning removes the inter-top-k penalty; "
                          f"got intertopk_penalty={loss_cfg.intertopk_penalty}")
    return train_supervised(extractor, data, cfg, loss_cfg, head=head)


# ---------------------------------------------------------------------------
# joint source+target adaptation
# ---------------------------------------------------------------------------

@dataclass
class AdaptResult:
    extractor: ToyExtractor
    head: ClassifierHead               # shared (OCL) or source head
    target_head: ClassifierHead | None  # TCL only
    apl_w: float
    apl_b: float
    history: list = field(default_factory=list)
    gate_history: list = field(default_factory=list)


def adapt_joint(extractor: ToyExtractor, source_head: ClassifierHead,
                source_ds: SyntheticDataset, target_ds: SyntheticDataset, mode: str,
                cfg: TrainConfig, loss_cfg: LossConfig,
                pseudo_labels: dict | None = None, dlglc: bool = False,
                gate_cfg: CorrectionConfig | None = None, dlglc_warmup: int = 0,
                apl_w: float = 10.0, apl_b: float = -5.0) -> AdaptResult:
    """Joint fine-tuning with L = L_source + L_target.

    Starts from the stage-I extractor and source head.  TCL adds a fresh
    target head over the pseudo clusters; OCL extends the source head and
    offsets target class indices past the source classes.  With dlglc on
    (classification modes only) the per-sample cross-entropy against the
    original pseudo label feeds an EMA trace, the loss-gate GMM is refit
    each epoch, and from epoch dlglc_warmup on the targets are replaced per
    the gate: keep / correct to the sharpened posterior / exclude.
    """
    if mode not in ("APL", "TCL", "OCL"):
        raise ConfigError(f"unknown adaptation mode {mode!r}")
    if mode in ("TCL", "OCL") and pseudo_labels is None:
        raise DataError(f"mode {mode} requires pseudo labels for the target data")
    if dlglc and mode == "APL":
        raise ConfigError("DLG-LC needs per-sample class labels; APL mode has none")
    gate_cfg = gate_cfg or CorrectionConfig()

    extractor = extractor.copy()
    n_source_classes = source_head.num_classes
    n_clusters = (max(pseudo_labels.values()) + 1) if pseudo_labels else 0
    target_head = None
    if mode == "TCL":
        head = ClassifierHead(source_head.weights.copy(), "source")
        target_head = ClassifierHead.init_random(n_clusters, loss_cfg.subcenters,
                                                 extractor.dim_out,
                                                 derive_rng(cfg.seed, "target-head"),
                                                 head_id="target")
    elif mode == "OCL":
        extra = ClassifierHead.init_random(n_clusters, loss_cfg.subcenters,
                                           extractor.dim_out,
                                           derive_rng(cfg.seed, "ocl-extension")).weights
        head = ClassifierHead(np.concatenate([source_head.weights.copy(), extra]), "source")
    else:
        head = ClassifierHead(source_head.weights.copy(), "source")
    apl_w, apl_b = float(apl_w), float(apl_b)

    trace = LossTrace(decay=gate_cfg.ema_decay)
    corrections: dict | None = None
    n_batches = max(1, min(len(source_ds), len(target_ds)) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history, gate_history = [], []
    step = 0
    for epoch in range(cfg.epochs):
        rng = derive_rng(cfg.seed, "adapt", epoch)
        src_chunks = _epoch_chunks(len(source_ds), cfg.batch_size, rng)[:n_batches]
        tgt_chunks = _epoch_chunks(len(target_ds), cfg.batch_size, rng)[:n_batches]
        losses = []
        for src_idx, tgt_idx in zip(src_chunks, tgt_chunks):
            lr = lr_at(cfg, step, total_steps)
            x_s = source_ds.segment(src_idx, rng)
            emb_s = extractor.embed(x_s)
            source = MarginBatch(emb_s, source_ds.speakers[src_idx], head, loss_cfg)

            tgt_names = [target_ds.names[i] for i in tgt_idx]
            if mode == "APL":
                x_t = target_ds.segment_pair(tgt_idx, rng)
                emb_t = extractor.embed(x_t.reshape(-1, x_t.shape[2]))
                emb_t = emb_t.reshape(len(tgt_idx), 2, -1)
                target = AplBatch(emb_t, apl_w, apl_b)
            else:
                x_t = target_ds.segment(tgt_idx, rng)
                emb_t = extractor.embed(x_t)
                labels = np.array([pseudo_labels[n_] for n_ in tgt_names], dtype=np.int64)
                soft, weights = None, None
                if corrections is not None:
                    soft = np.zeros((len(tgt_idx), n_clusters))
                    weights = np.ones(len(tgt_idx))
                    for j, name in enumerate(tgt_names):
                        if name in corrections:
                            dist, w = corrections[name]
                            soft[j] = dist
                            weights[j] = w
                            labels[j] = int(np.argmax(dist))
                        else:
                            soft[j, labels[j]] = 1.0
                tgt_head = target_head if mode == "TCL" else None
                target = MarginBatch(emb_t, labels, tgt_head, loss_cfg, soft, weights)

            bundle = joint_loss(source, target, mode,
                                n_source_classes=n_source_classes if mode == "OCL" else None)
            if not np.isfinite(bundle.loss):
                raise NumericsError(f"adaptation diverged at epoch {epoch} step {step}: "
                                    f"loss={bundle.loss}, lr={lr}")
            losses.append(bundle.loss)
            if dlglc and bundle.target is not None:
                # gate on the loss against the original pseudo label (margin-free),
                # independent of whatever target the sample is trained on
                cos_t = class_cosines(emb_t, target_head if mode == "TCL" else head)
                if mode == "OCL":
                    cos_t = cos_t[:, n_source_classes:]
                logp = _log_softmax(loss_cfg.scale * cos_t)
                pseudo_ce = -logp[np.arange(len(tgt_idx)),
                                  [pseudo_labels[n_] for n_ in tgt_names]]
                trace.update_batch(tgt_names, pseudo_ce)

            # parameter updates: extractor from both sides, heads per mode
            g_proj = x_s.T @ bundle.source.grad_emb
            g_bias = bundle.source.grad_emb.sum(axis=0)
            tgt = bundle.target
            if tgt is not None:
                if mode == "APL":
                    g_flat = tgt.grad_emb.reshape(-1, tgt.grad_emb.shape[2])
                    g_proj += x_t.reshape(-1, x_t.shape[2]).T @ g_flat
                    g_bias += g_flat.sum(axis=0)
                    apl_w = max(apl_w - lr * tgt.grad_w, 1e-3)
                    apl_b -= lr * tgt.grad_b
                else:
                    g_proj += x_t.T @ tgt.grad_emb
                    g_bias += tgt.grad_emb.sum(axis=0)
            extractor.projection -= lr * (g_proj + cfg.weight_decay * extractor.projection)
            extractor.bias -= lr * g_bias

            g_head = bundle.source.grad_weights.copy()
            if mode == "OCL" and tgt is not None:
                g_head += tgt.grad_weights
            head.weights -= lr * (g_head + cfg.weight_decay * head.weights)
            if mode == "TCL" and tgt is not None:
                target_head.weights -= lr * (tgt.grad_weights
                                             + cfg.weight_decay * target_head.weights)
            step += 1

        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "lr": lr_at(cfg, step - 1, total_steps)})
        log.info("epoch=%d loss=%.6f lr=%.6g", epoch, history[-1]["loss"],
                 history[-1]["lr"])

        if dlglc and len(trace) >= 4:
            values = np.array(list(trace.values.values()))
            if np.ptp(values) == 0:
                log.warning("loss trace degenerate at epoch %d; gate skipped", epoch)
                continue
            gate = fit_loss_gmm(values)
            emb_all = extractor.embed(target_ds.inputs)
            cos = class_cosines(emb_all, target_head if mode == "TCL" else head)
            if mode == "OCL":
                cos = cos[:, n_source_classes:]
            logits = {name: loss_cfg.scale * cos[i] for i, name in enumerate(target_ds.names)}
            result = select_and_correct(trace, gate, logits, pseudo_labels, gate_cfg)
            if epoch + 1 >= dlglc_warmup:
                corrections = {name: (result.targets[i], result.weights[i])
                               for i, name in enumerate(result.names)}
            line = gate_diagnostics(gate, result)
            log.info("%s", line)
            gate_history.append({"epoch": epoch, "mu1": float(gate.means[0]),
                                 "mu2": float(gate.means[1]),
                                 "tau": gate_threshold(gate),
                                 "reliable_fraction": result.reliable_fraction,
                                 "line": line})

    return AdaptResult(extractor, head, target_head, apl_w, apl_b, history, gate_history)
