"""End-to-end pipelines.

track1-score: per system cosine -> as-norm -> calibration, then fusion and
metrics.  track3-adapt: target statistics -> statistic adaptation ->
(optionally k-means pseudo cohort, or full joint training in synthetic data
mode) -> the same scoring chain.  Every stage writes one artifact with a
stage suffix into the run directory, next to a manifest of input hashes and
the resolved configuration, so a run is byte-reproducible from (config,
seed) alone and stages can be reproduced one by one from the CLI.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import corpus
from .adaptation import (apply_statistic_adaptation, build_pseudo_cohort,
                         compute_domain_stats, spherical_kmeans, write_pseudo_labels)
from .config import PipelineConfig, config_load, dump_config
from .corpus import EmbeddingSet, ScoreSet, TrialList
from .errors import ConfigError, DataError
from .lossgate import CorrectionConfig
from .losses import LossConfig
from .parallel import ordered_map
from .protocol import quality_features, stage1
from .rand import derive_rng
from .scoring import (Cohort, apply_calibration, as_norm, build_cohort,
                      compute_metrics, fuse_scores, score_trials, train_calibration)
from .synthdata import adaptation_benchmark_config, chain_benchmark_config, make_benchmark
from .training import TrainConfig, adapt_joint, embed_dataset

PIPELINE_KINDS = ("track1-score", "track3-adapt")


@dataclass
class RunResult:
    out_dir: str
    plan: list
    artifacts: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _coerce_config(config) -> PipelineConfig:
    if isinstance(config, PipelineConfig):
        return config
    return config_load(config)


def _loss_config(cfg: PipelineConfig) -> LossConfig:
    return LossConfig(margin_type=cfg.get("loss", "margin-type"),
                      scale=cfg.get("loss", "scale"),
                      margin=cfg.get("loss", "margin"),
                      subcenters=cfg.get("loss", "subcenters"),
                      intertopk_penalty=cfg.get("loss", "intertopk-penalty"),
                      intertopk_k=cfg.get("loss", "intertopk-k"))


def read_durations(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise corpus.FormatError(f"{path}:{lineno}: expected `name seconds`")
            out[fields[0]] = float(fields[1])
    return out


def _quality_from_durations(durations: dict | None, trials: TrialList):
    if durations is None:
        return None
    try:
        return np.vstack([[np.log(durations[t.enroll]) for t in trials.pairs],
                          [np.log(durations[t.test]) for t in trials.pairs]])
    except KeyError as e:
        raise DataError(f"no duration for {e.args[0]!r}") from None


class _Runner:
    """Shared machinery: stage artifacts, hashing, dry-run planning."""

    def __init__(self, cfg: PipelineConfig, out_dir, dry_run: bool):
        self.cfg = cfg
        self.out_dir = out_dir
        self.dry_run = dry_run
        self.plan: list[str] = []
        self.artifacts: list[str] = []
        self.inputs: list[str] = []
        self.metrics: dict = {}

    def stage(self, description: str):
        self.plan.append(description)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def emit_scores(self, name: str, scores: ScoreSet):
        if not self.dry_run:
            corpus.write_score_set(scores, self.path(name))
        self.artifacts.append(name)

    def emit_text(self, name: str, text: str):
        if not self.dry_run:
            with open(self.path(name), "w", encoding="utf-8") as f:
                f.write(text)
        self.artifacts.append(name)

    def emit_metrics(self, label: str, scores: ScoreSet, labeled: TrialList | None):
        if labeled is None or not labeled.labeled:
            return
        report = compute_metrics(scores.with_labels_from(labeled),
                                 p_target=self.cfg.get("scoring", "p-target"),
                                 c_miss=self.cfg.get("scoring", "c-miss"),
                                 c_fa=self.cfg.get("scoring", "c-fa"))
        self.metrics[label] = report

    def write_metrics_files(self):
        if not self.metrics:
            return
        text_lines, kv_lines = [], []
        for label in self.metrics:
            report = self.metrics[label]
            text_lines.append(f"{label}: {report.as_text()}")
            for line in report.as_keyvalues().splitlines():
                kv_lines.append(f"{label}.{line}")
        self.emit_text("metrics.txt", "\n".join(text_lines) + "\n")
        self.emit_text("metrics.kv", "\n".join(kv_lines) + "\n")

    def write_manifest(self, config_text: str, input_paths: list):
        lines = [f"config.sha256 {hashlib.sha256(config_text.encode()).hexdigest()}"]
        for p in input_paths:
            lines.append(f"{_sha256(p)}  {os.path.basename(p)}")
        self.emit_text("inputs.sha256", "\n".join(lines) + "\n")
        self.emit_text("resolved.cfg", config_text)


def _score_chain(runner: _Runner, systems: dict, trials: TrialList,
                 cal_trials: TrialList | None, cohort: Cohort | None,
                 durations: dict | None, jobs: int) -> ScoreSet | None:
    """cosine -> as-norm -> calibration per system, then fusion.

    `systems` maps system name to its EmbeddingSet.  Returns fused scores
    (or the single calibrated set)."""
    cfg = runner.cfg
    top_n = cfg.get("scoring", "cohort-top-n")
    use_quality = cfg.get("scoring", "quality-features") == "log-duration"
    names = list(systems)

    runner.stage(f"cosine: score {len(names)} system(s) over {len(trials)} trials")
    runner.stage("asnorm: adaptive score normalization against the cohort" if cohort
                 else "asnorm: skipped (no cohort)")
    runner.stage("calibrate: logistic calibration on the calibration trials"
                 if cal_trials is not None else "calibrate: skipped (no calibration trials)")
    runner.stage("fuse: weighted score fusion")
    runner.stage("metrics: EER and minDCF per system and fused")
    if runner.dry_run:
        for name in names:
            runner.artifacts.append(f"{name}.cosine.scores")
            if cohort:
                runner.artifacts.append(f"{name}.asnorm.scores")
            if cal_trials is not None:
                runner.artifacts.append(f"{name}.calibrated.scores")
        runner.artifacts.extend(["fused.scores", "metrics.txt", "metrics.kv"])
        return None

    def one_system(name: str) -> ScoreSet:
        emb = systems[name]
        scores = score_trials(emb, trials)
        corpus.write_score_set(scores, runner.path(f"{name}.cosine.scores"))
        if cohort:
            scores = as_norm(scores, emb, cohort, top_n=min(top_n, cohort.size))
            corpus.write_score_set(scores, runner.path(f"{name}.asnorm.scores"))
        if cal_trials is not None:
            cal_raw = score_trials(emb, cal_trials.without_labels())
            if cohort:
                cal_raw = as_norm(cal_raw, emb, cohort, top_n=min(top_n, cohort.size))
            cal_scored = ScoreSet(cal_trials, cal_raw.scores)
            q_cal = (_quality_from_durations(durations, cal_trials)
                     if use_quality else None)
            q_eval = (_quality_from_durations(durations, trials)
                      if use_quality else None)
            model = train_calibration(cal_scored, q_cal,
                                      ridge=cfg.get("scoring", "calibration-ridge"))
            scores = apply_calibration(model, scores, q_eval)
            corpus.write_score_set(scores, runner.path(f"{name}.calibrated.scores"))
        return scores

    finals = ordered_map(one_system, names, jobs)
    for name in names:
        runner.artifacts.append(f"{name}.cosine.scores")
        if cohort:
            runner.artifacts.append(f"{name}.asnorm.scores")
        if cal_trials is not None:
            runner.artifacts.append(f"{name}.calibrated.scores")
    for name, scores in zip(names, finals):
        runner.emit_metrics(name, scores, trials)

    if cfg.get("scoring", "fusion") == "learn":
        labeled = [ScoreSet(s.pairs, s.scores).with_labels_from(trials) for s in finals]
        fused = fuse_scores(labeled, "learn")
        fused = ScoreSet(fused.pairs.without_labels(), fused.scores)
    else:
        fused = fuse_scores(finals, "equal")
    runner.emit_scores("fused.scores", fused)
    runner.emit_metrics("fused", fused, trials)
    return fused


def _load_file_inputs(runner: _Runner):
    cfg = runner.cfg
    paths = cfg.section("paths")
    if not paths["systems"]:
        raise ConfigError("[paths] systems must list at least one embedding file")
    if not paths["trials"]:
        raise ConfigError("[paths] trials is required")
    systems = {}
    for p in paths["systems"]:
        name = os.path.splitext(os.path.basename(p))[0]
        systems[name] = corpus.read_embedding_set(p)
        runner.inputs.append(p)
    trials = corpus.parse_trial_list(paths["trials"])
    runner.inputs.append(paths["trials"])
    cal_trials = None
    if paths["calibration-trials"]:
        cal_trials = corpus.parse_trial_list(paths["calibration-trials"])
        if not cal_trials.labeled:
            raise DataError("calibration trials must be labeled")
        runner.inputs.append(paths["calibration-trials"])
    durations = None
    if paths["durations"]:
        durations = read_durations(paths["durations"])
        runner.inputs.append(paths["durations"])
    return systems, trials, cal_trials, durations


def _file_cohort(runner: _Runner) -> Cohort | None:
    paths = runner.cfg.section("paths")
    if not paths["cohort-embeddings"]:
        return None
    emb = corpus.read_embedding_set(paths["cohort-embeddings"])
    runner.inputs.append(paths["cohort-embeddings"])
    if paths["cohort-speakers"]:
        speaker_of = {}
        with open(paths["cohort-speakers"], "r", encoding="utf-8") as f:
            for line in f:
                fields = line.split()
                if fields:
                    speaker_of[fields[0]] = fields[1]
        runner.inputs.append(paths["cohort-speakers"])
    else:
        speaker_of = {n: n for n in emb.names}
    return build_cohort(emb, speaker_of)


def _run_track1(runner: _Runner, jobs: int):
    systems, trials, cal_trials, durations = _load_file_inputs(runner)
    cohort = _file_cohort(runner)
    _score_chain(runner, systems, trials, cal_trials, cohort, durations, jobs)


def _run_track3_files(runner: _Runner, jobs: int):
    cfg = runner.cfg
    systems, trials, cal_trials, durations = _load_file_inputs(runner)
    paths = cfg.section("paths")
    seed = cfg.get("run", "seed")

    do_sa = cfg.get("adaptation", "statistic-adaptation")
    pseudo_cohort = cfg.get("adaptation", "pseudo-cohort")
    target_emb = None
    if paths["target-embeddings"]:
        target_emb = corpus.read_embedding_set(paths["target-embeddings"])
        runner.inputs.append(paths["target-embeddings"])

    cohort = None
    if do_sa or pseudo_cohort:
        if target_emb is None:
            raise ConfigError("[paths] target-embeddings is required for adaptation")
        runner.stage("stats: target-domain statistics")
        stats = compute_domain_stats(target_emb, "target")
        if not runner.dry_run:
            corpus.write_matrices(runner.path("target.stats.mat"),
                                  {"mean": stats.mean.reshape(1, -1),
                                   "count": np.array([[stats.count]])})
        runner.artifacts.append("target.stats.mat")
        if do_sa:
            runner.stage("adapt: subtract target statistics from every system")
            systems = {n: apply_statistic_adaptation(e, stats) for n, e in systems.items()}
            target_emb = apply_statistic_adaptation(target_emb, stats)
        if pseudo_cohort:
            runner.stage("kmeans: pseudo labels and pseudo-speaker cohort")
            labels = spherical_kmeans(target_emb, cfg.get("adaptation", "kmeans-k"),
                                      seed=seed,
                                      max_iter=cfg.get("adaptation", "kmeans-max-iter"))
            if not runner.dry_run:
                write_pseudo_labels(labels, runner.path("pseudo-labels.txt"))
                cohort = build_pseudo_cohort(target_emb, labels)
            runner.artifacts.append("pseudo-labels.txt")
    if cohort is None:
        cohort = _file_cohort(runner)
    _score_chain(runner, systems, trials, cal_trials, cohort, durations, jobs)


def _run_track3_synthetic(runner: _Runner, jobs: int):
    cfg = runner.cfg
    seed = cfg.get("run", "seed")
    preset = (chain_benchmark_config() if cfg.get("data", "benchmark") == "chain"
              else adaptation_benchmark_config())
    mode = cfg.get("train", "adapt-mode")

    runner.stage(f"bench: synthetic two-domain benchmark (seed {seed})")
    runner.stage("stage1: supervised pre-training on the source domain")
    runner.stage(f"adapt_joint: mode {mode}" if mode != "none"
                 else "adapt_joint: skipped (mode none)")
    runner.stage("stats: target statistics + statistic adaptation")
    runner.stage("kmeans: pseudo labels and pseudo cohort")
    runner.stage("score chain: cosine -> asnorm -> calibration -> metrics")
    runner.artifacts.extend(["model.stage1.mat", "eval.emb"])
    if mode != "none":
        runner.artifacts.append("model.adapted.mat")
    if runner.dry_run:
        runner.artifacts.extend(["target.stats.mat", "pseudo-labels.txt",
                                 "eval.cosine.scores", "eval.asnorm.scores",
                                 "eval.calibrated.scores", "fused.scores",
                                 "metrics.txt", "metrics.kv"])
        return

    bench = make_benchmark(seed, preset)
    pre = stage1(bench, seed, cfg.get("train", "embedding-dim"),
                 epochs=cfg.get("train", "epochs"),
                 batch_size=cfg.get("train", "batch-size"))
    pre.extractor.save(runner.path("model.stage1.mat"))
    extractor, head = pre.extractor, pre.head

    loss_cfg = _loss_config(cfg)
    if mode != "none":
        acfg = TrainConfig(lr_initial=cfg.get("train", "adapt-lr-initial"),
                           lr_final=cfg.get("train", "adapt-lr-final"),
                           weight_decay=cfg.get("train", "weight-decay"),
                           epochs=cfg.get("train", "adapt-epochs"),
                           batch_size=cfg.get("train", "adapt-batch-size"),
                           seed=seed)
        pseudo = None
        if mode in ("TCL", "OCL"):
            stats0 = compute_domain_stats(embed_dataset(extractor, bench.target_train))
            emb_tt = apply_statistic_adaptation(embed_dataset(extractor, bench.target_train),
                                                stats0)
            pseudo = spherical_kmeans(emb_tt, cfg.get("adaptation", "kmeans-k"),
                                      seed=seed).assignment
        gate_cfg = CorrectionConfig(confidence=cfg.get("dlglc", "confidence"),
                                    temperature=cfg.get("dlglc", "temperature"),
                                    ema_decay=cfg.get("dlglc", "ema-decay"))
        adapted = adapt_joint(extractor, head, bench.source_train, bench.target_train,
                              mode, acfg, loss_cfg, pseudo_labels=pseudo,
                              dlglc=cfg.get("dlglc", "enabled") and mode != "APL",
                              gate_cfg=gate_cfg,
                              dlglc_warmup=cfg.get("dlglc", "warmup-epochs"),
                              apl_w=cfg.get("loss", "apl-init-w"),
                              apl_b=cfg.get("loss", "apl-init-b"))
        extractor = adapted.extractor
        extractor.save(runner.path("model.adapted.mat"))

    emb_eval = embed_dataset(extractor, bench.target_eval)
    emb_tgt = embed_dataset(extractor, bench.target_train)
    stats = compute_domain_stats(emb_tgt, "target")
    corpus.write_matrices(runner.path("target.stats.mat"),
                          {"mean": stats.mean.reshape(1, -1),
                           "count": np.array([[stats.count]])})
    if cfg.get("adaptation", "statistic-adaptation"):
        emb_eval = apply_statistic_adaptation(emb_eval, stats)
        emb_tgt = apply_statistic_adaptation(emb_tgt, stats)
    corpus.write_embedding_set(emb_eval, runner.path("eval.emb"))

    labels = spherical_kmeans(emb_tgt, cfg.get("adaptation", "kmeans-k"), seed=seed,
                              max_iter=cfg.get("adaptation", "kmeans-max-iter"))
    write_pseudo_labels(labels, runner.path("pseudo-labels.txt"))
    runner.artifacts.extend(["target.stats.mat", "pseudo-labels.txt"])
    cohort = build_pseudo_cohort(emb_tgt, labels)

    durations = {n: d for n, d in zip(bench.target_eval.names, bench.target_eval.durations)}
    durations.update({n: d for n, d in zip(bench.target_cal.names,
                                           bench.target_cal.durations)})
    emb_cal = embed_dataset(extractor, bench.target_cal)
    if cfg.get("adaptation", "statistic-adaptation"):
        emb_cal = apply_statistic_adaptation(emb_cal, stats)
    # calibration embeddings ride along under their own names
    merged = EmbeddingSet(list(emb_eval.names) + list(emb_cal.names),
                          np.vstack([emb_eval.vectors, emb_cal.vectors]))
    systems = {"eval": merged}
    _score_chain(runner, systems, bench.trials_eval, bench.trials_cal, cohort,
                 durations, jobs)


def run_pipeline(kind: str, config, out_dir=None, seed=None, jobs=None,
                 dry_run: bool = False) -> RunResult:
    if kind not in PIPELINE_KINDS:
        raise ConfigError(f"pipeline kind must be one of {PIPELINE_KINDS}, got {kind!r}")
    cfg = _coerce_config(config)
    if seed is not None:
        cfg.values[("run", "seed")] = int(seed)
    if jobs is not None:
        cfg.values[("run", "jobs")] = int(jobs)
    out_dir = out_dir or cfg.get("run", "out-dir")
    if not dry_run:
        os.makedirs(out_dir, exist_ok=True)
    runner = _Runner(cfg, out_dir, dry_run)

    if kind == "track1-score":
        _run_track1(runner, cfg.get("run", "jobs"))
    elif cfg.get("data", "mode") == "synthetic":
        _run_track3_synthetic(runner, cfg.get("run", "jobs"))
    else:
        _run_track3_files(runner, cfg.get("run", "jobs"))

    if not dry_run:
        runner.write_metrics_files()
        runner.write_manifest(dump_config(cfg), runner.inputs)
    return RunResult(out_dir, runner.plan, runner.artifacts, runner.metrics)
