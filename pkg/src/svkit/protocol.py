"""Desk-scale benchmark protocols.

Two fixed experiment recipes on the synthetic two-domain benchmark:

* back-end chain: cosine with source statistics -> statistic adaptation ->
  as-norm (ground-truth and pseudo cohorts) -> duration-aware calibration;
* joint adaptation: stage-I pre-training, APL adaptation, pseudo labels
  estimated from the APL system, then TCL / OCL with and without the
  dynamic loss-gate, everything scored with the same SA+cosine back-end.

Both are deterministic functions of their seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import (apply_statistic_adaptation, build_pseudo_cohort,
                         compute_domain_stats, spherical_kmeans)
from .corpus import EmbeddingSet, TrialList
from .losses import LossConfig
from .rand import derive_rng
from .scoring import (apply_calibration, as_norm, build_cohort, compute_eer,
                      score_trials, train_calibration)
from .synthdata import (BenchmarkConfig, SyntheticDataset, TwoDomainBenchmark,
                        adaptation_benchmark_config, chain_benchmark_config,
                        make_benchmark, pseudo_label_accuracy)
from .training import (AdaptResult, ToyExtractor, TrainConfig, TrainResult,
                       adapt_joint, embed_dataset, train_supervised)

CHAIN_EMB_DIM = 16
CHAIN_TOP_N = 30
ADAPT_EMB_DIM = 12
ADAPT_SEEDS = (1, 2, 3)
DLGLC_WARMUP = 20


def quality_features(ds: SyntheticDataset, trials: TrialList) -> np.ndarray:
    """Log enrollment/test durations, the stand-in calibration quality inputs."""
    dur = {n: d for n, d in zip(ds.names, ds.durations)}
    return np.vstack([[np.log(dur[t.enroll]) for t in trials.pairs],
                      [np.log(dur[t.test]) for t in trials.pairs]])


def stage1(bench: TwoDomainBenchmark, seed: int, emb_dim: int,
           epochs: int = 40, batch_size: int = 16) -> TrainResult:
    """Supervised pre-training on the labeled source domain."""
    rng = derive_rng(seed, "extractor")
    extractor = ToyExtractor.init_random(bench.config.input_dim, emb_dim, rng)
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed)
    return train_supervised(extractor, bench.source_train, cfg, LossConfig())


def adaptation_train_config(seed: int, epochs: int = 80,
                            batch_size: int = 16) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=batch_size,
                       lr_initial=0.02, lr_final=1e-5, seed=seed)


@dataclass
class ChainResult:
    eer_raw: float               # cosine after source-statistics normalization
    eer_sa: float                # cosine after target-statistics adaptation
    eer_asnorm_gt: float         # + as-norm, ground-truth speaker cohort
    eer_asnorm_pseudo: float     # + as-norm, pseudo-label cohort
    eer_calibrated: float        # + duration-aware calibration
    kmeans_accuracy: float
    scores: dict = field(default_factory=dict)
    pseudo_assignment: dict = field(default_factory=dict)


def backend_chain(extractor: ToyExtractor, bench: TwoDomainBenchmark, seed: int,
                  top_n: int = CHAIN_TOP_N) -> ChainResult:
    """Table-4-style back-end chain on one extractor, all stages composed."""
    emb_eval = embed_dataset(extractor, bench.target_eval)
    emb_tgt = embed_dataset(extractor, bench.target_train)
    emb_cal = embed_dataset(extractor, bench.target_cal)

    src_stats = compute_domain_stats(embed_dataset(extractor, bench.source_train), "source")
    tgt_stats = compute_domain_stats(emb_tgt, "target")

    raw_scores = score_trials(apply_statistic_adaptation(emb_eval, src_stats),
                              bench.trials_eval)
    emb_eval_sa = apply_statistic_adaptation(emb_eval, tgt_stats)
    emb_tgt_sa = apply_statistic_adaptation(emb_tgt, tgt_stats)
    emb_cal_sa = apply_statistic_adaptation(emb_cal, tgt_stats)
    sa_scores = score_trials(emb_eval_sa, bench.trials_eval)

    labels = spherical_kmeans(emb_tgt_sa, bench.target_train.num_speakers, seed=seed)
    gt_cohort = build_cohort(emb_tgt_sa, bench.target_train.speaker_of())
    ps_cohort = build_pseudo_cohort(emb_tgt_sa, labels)
    top_n = min(top_n, gt_cohort.size)

    asn_gt = as_norm(sa_scores, emb_eval_sa, gt_cohort, top_n=top_n)
    asn_ps = as_norm(sa_scores, emb_eval_sa, ps_cohort, top_n=top_n)

    cal_scores = as_norm(score_trials(emb_cal_sa, bench.trials_cal), emb_cal_sa,
                         ps_cohort, top_n=top_n)
    model = train_calibration(cal_scores, quality_features(bench.target_cal,
                                                           bench.trials_cal))
    calibrated = apply_calibration(model, asn_ps,
                                   quality_features(bench.target_eval,
                                                    bench.trials_eval))

    return ChainResult(
        eer_raw=compute_eer(raw_scores),
        eer_sa=compute_eer(sa_scores),
        eer_asnorm_gt=compute_eer(asn_gt),
        eer_asnorm_pseudo=compute_eer(asn_ps),
        eer_calibrated=compute_eer(calibrated),
        kmeans_accuracy=pseudo_label_accuracy(labels.assignment, bench.target_train),
        scores={"raw": raw_scores, "sa": sa_scores, "asnorm_gt": asn_gt,
                "asnorm_pseudo": asn_ps, "calibrated": calibrated},
        pseudo_assignment=labels.assignment)


def run_chain_protocol(seed: int, cfg: BenchmarkConfig | None = None) -> ChainResult:
    bench = make_benchmark(seed, cfg or chain_benchmark_config())
    pre = stage1(bench, seed, CHAIN_EMB_DIM)
    return backend_chain(pre.extractor, bench, seed)


def sa_cosine_eer(extractor: ToyExtractor, bench: TwoDomainBenchmark) -> float:
    """The fixed comparison back-end: statistic adaptation plus cosine."""
    emb = embed_dataset(extractor, bench.target_eval)
    stats = compute_domain_stats(embed_dataset(extractor, bench.target_train))
    return compute_eer(score_trials(apply_statistic_adaptation(emb, stats),
                                    bench.trials_eval))


@dataclass
class AdaptationRun:
    eers: dict                 # mode name -> eval EER under the SA+cosine back-end
    kmeans_accuracy: float
    pseudo_assignment: dict
    results: dict = field(default_factory=dict)  # mode name -> AdaptResult


def run_adaptation_protocol(seed: int, cfg: BenchmarkConfig | None = None,
                            epochs: int = 80, modes=("APL", "TCL", "OCL",
                                                     "TCL+DLG", "OCL+DLG")) -> AdaptationRun:
    """One seed of the Table-5-style comparison.

    Pseudo labels are estimated from the APL-adapted system, mirroring the
    way the classification modes are bootstrapped in the reference setup.
    """
    bench = make_benchmark(seed, cfg or adaptation_benchmark_config())
    pre = stage1(bench, seed, ADAPT_EMB_DIM)
    loss_cfg = LossConfig()
    acfg = adaptation_train_config(seed, epochs=epochs)

    eers = {"SA": sa_cosine_eer(pre.extractor, bench)}
    results: dict = {}

    apl = adapt_joint(pre.extractor, pre.head, bench.source_train, bench.target_train,
                      "APL", replace(acfg, batch_size=8), loss_cfg)
    results["APL"] = apl
    eers["APL"] = sa_cosine_eer(apl.extractor, bench)

    stats = compute_domain_stats(embed_dataset(apl.extractor, bench.target_train))
    emb_tt = apply_statistic_adaptation(embed_dataset(apl.extractor, bench.target_train),
                                        stats)
    labels = spherical_kmeans(emb_tt, bench.target_train.num_speakers, seed=seed)

    for name in modes:
        if name == "APL":
            continue
        mode, dlg = (name[:3], True) if name.endswith("+DLG") else (name, False)
        run = adapt_joint(pre.extractor, pre.head, bench.source_train,
                          bench.target_train, mode, acfg, loss_cfg,
                          pseudo_labels=labels.assignment, dlglc=dlg,
                          dlglc_warmup=DLGLC_WARMUP)
        results[name] = run
        eers[name] = sa_cosine_eer(run.extractor, bench)

    return AdaptationRun(eers, pseudo_label_accuracy(labels.assignment,
                                                     bench.target_train),
                         labels.assignment, results)
