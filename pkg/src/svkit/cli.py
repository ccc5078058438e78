"""Command-line entry point.

Subcommands: emb, trials, feat, score, adapt, dlg, train, run, config.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
The default --config path can be set through the SVKIT_CONFIG environment
variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import corpus
from .adaptation import (apply_statistic_adaptation, build_pseudo_cohort,
                         compute_domain_stats, read_pseudo_labels, spherical_kmeans,
                         write_pseudo_labels)
from .errors import ConfigError, DataError, NumericsError
from .features import AugmentConfig, Waveform, offline_plan, online_augment
from .lossgate import GateModel, fit_loss_gmm, gate_diagnostics, gate_threshold
from .pipeline import PIPELINE_KINDS, read_durations, run_pipeline
from .rand import derive_rng
from .scoring import (apply_calibration, as_norm, build_cohort, compute_metrics,
                      fuse_scores, score_trials, train_calibration)

log = logging.getLogger("svkit.cli")


def _config_path(args) -> str:
    path = getattr(args, "config", None) or os.environ.get("SVKIT_CONFIG")
    if not path:
        raise ConfigError("no config given: pass --config or set SVKIT_CONFIG")
    return path


# ---------------------------------------------------------------------------
# emb / trials
# ---------------------------------------------------------------------------

def cmd_emb_pack(args):
    names, rows = [], []
    with open(args.input, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 2:
                raise corpus.FormatError(f"{args.input}:{lineno}: expected `name v1 v2 ...`")
            names.append(fields[0])
            rows.append([float(v) for v in fields[1:]])
    corpus.write_embedding_set(corpus.EmbeddingSet(names, np.array(rows)), args.output)
    print(f"packed {len(names)} embeddings -> {args.output}")


def cmd_emb_unpack(args):
    emb = corpus.read_embedding_set(args.input)
    with open(args.output, "w", encoding="utf-8") as f:
        for name, vec in zip(emb.names, emb.vectors):
            f.write(name + " " + " ".join(f"{v:.9g}" for v in vec) + "\n")
    print(f"unpacked {len(emb)} embeddings (dim {emb.dim}) -> {args.output}")


def cmd_trials_validate(args):
    trials = corpus.parse_trial_list(args.trials)
    missing = 0
    if args.emb:
        emb = corpus.read_embedding_set(args.emb)
        for t in trials.pairs:
            missing += (t.enroll not in emb) + (t.test not in emb)
    kind = "labeled" if trials.labeled else "unlabeled"
    print(f"{args.trials}: {len(trials)} {kind} pairs", end="")
    if args.emb:
        print(f", {missing} missing embedding reference(s)", end="")
    print()
    if missing:
        raise DataError(f"{missing} trial name(s) missing from {args.emb}")


# ---------------------------------------------------------------------------
# feat
# ---------------------------------------------------------------------------

def cmd_feat_augment(args):
    cfg = cfgmod.config_load(_config_path(args))
    feat = cfg.section("features")
    seed = args.seed if args.seed is not None else cfg.get("run", "seed")
    aug = AugmentConfig(speed_ratios=tuple(feat["speed-ratios"]),
                        noise_probability=feat["noise-probability"],
                        noise_types=tuple(feat["noise-types"]),
                        segment_seconds=feat["segment-seconds"],
                        sample_rate=feat["sample-rate"],
                        num_mel_bins=feat["num-mel-bins"],
                        cmn_window=feat["cmn-window"], seed=seed)
    manifest = corpus.read_manifest(args.manifest)
    plan = offline_plan(manifest, aug)
    os.makedirs(args.out, exist_ok=True)
    corpus.write_manifest(plan, os.path.join(args.out, "augmented.manifest"))

    # no corpus audio at desk scale: a deterministic tone+noise stand-in per
    # utterance exercises the real augmentation/feature path end to end
    done = 0
    for entry in manifest.entries:
        rng = derive_rng(seed, "wave", entry.utt)
        n = int(round(entry.duration * aug.sample_rate))
        t = np.arange(n) / aug.sample_rate
        freq = 80.0 + float(rng.uniform(0.0, 220.0))
        wave = Waveform(np.sin(2 * np.pi * freq * t) + 0.1 * rng.standard_normal(n),
                        aug.sample_rate)
        feats = online_augment(wave, aug, derive_rng(seed, "augment", entry.utt))
        corpus.write_matrices(os.path.join(args.out, f"{entry.utt}.feats.mat"),
                              {entry.utt: feats.frames})
        done += 1
    print(f"augment plan: {len(manifest)} -> {len(plan)} entries; "
          f"{done} feature file(s) in {args.out}")


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def cmd_score_cosine(args):
    emb = corpus.read_embedding_set(args.emb)
    trials = corpus.parse_trial_list(args.trials)
    corpus.write_score_set(score_trials(emb, trials.without_labels()), args.out)
    print(f"scored {len(trials)} trials -> {args.out}")


def _load_cohort(path, speakers_path=None):
    emb = corpus.read_embedding_set(path)
    if speakers_path:
        speaker_of = {}
        with open(speakers_path, "r", encoding="utf-8") as f:
            for line in f:
                fields = line.split()
                if fields:
                    speaker_of[fields[0]] = fields[1]
    else:
        speaker_of = {n: n for n in emb.names}
    return build_cohort(emb, speaker_of)


def cmd_score_asnorm(args):
    raw = corpus.read_score_set(args.scores)
    emb = corpus.read_embedding_set(args.emb)
    cohort = _load_cohort(args.cohort, args.cohort_speakers)
    out = as_norm(raw, emb, cohort, top_n=min(args.top_n, cohort.size))
    corpus.write_score_set(out, args.out)
    print(f"as-norm over cohort of {cohort.size} -> {args.out}")


def _quality_from(durations_path, pairs):
    if not durations_path:
        return None
    durations = read_durations(durations_path)
    return np.vstack([[np.log(durations[t.enroll]) for t in pairs.pairs],
                      [np.log(durations[t.test]) for t in pairs.pairs]])


def cmd_score_calibrate(args):
    train_scores = corpus.read_score_set(args.train_scores)
    train_trials = corpus.parse_trial_list(args.train_trials)
    labeled = train_scores.with_labels_from(train_trials)
    model = train_calibration(labeled, _quality_from(args.durations, labeled.pairs))
    raw = corpus.read_score_set(args.scores)
    out = apply_calibration(model, raw, _quality_from(args.durations, raw.pairs))
    corpus.write_score_set(out, args.out)
    flag = " (degenerate: score coefficient ~ 0)" if model.degenerate else ""
    print("calibration weights: " +
          " ".join(f"{w:.6g}" for w in model.weights) + flag)


def cmd_score_fuse(args):
    sets = [corpus.read_score_set(p) for p in args.scores]
    if args.weights == "learn":
        trials = corpus.parse_trial_list(args.trials)
        sets = [s.with_labels_from(trials) for s in sets]
        fused = fuse_scores(sets, "learn")
        fused = corpus.ScoreSet(fused.pairs.without_labels(), fused.scores)
    elif args.weights == "equal":
        fused = fuse_scores(sets, "equal")
    else:
        fused = fuse_scores(sets, [float(w) for w in args.weights.split(",")])
    corpus.write_score_set(fused, args.out)
    print(f"fused {len(sets)} systems -> {args.out}")


def cmd_score_metrics(args):
    scores = corpus.read_score_set(args.scores)
    trials = corpus.parse_trial_list(args.trials)
    report = compute_metrics(scores.with_labels_from(trials), p_target=args.p_target,
                             c_miss=args.c_miss, c_fa=args.c_fa)
    print(report.as_text())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report.as_keyvalues())


# ---------------------------------------------------------------------------
# adapt / dlg
# ---------------------------------------------------------------------------

def cmd_adapt_stats(args):
    emb = corpus.read_embedding_set(args.emb)
    stats = compute_domain_stats(emb, args.tag)
    corpus.write_matrices(args.out, {"mean": stats.mean.reshape(1, -1),
                                     "count": np.array([[stats.count]])})
    print(f"stats over {stats.count} embeddings -> {args.out}")


def _read_stats(path):
    from .adaptation import DomainStats
    mats = corpus.read_matrices(path)
    return DomainStats(mats["mean"].reshape(-1), int(mats["count"][0, 0]))


def cmd_adapt_apply(args):
    emb = corpus.read_embedding_set(args.emb)
    corpus.write_embedding_set(apply_statistic_adaptation(emb, _read_stats(args.stats)),
                               args.out)
    print(f"adapted {len(emb)} embeddings -> {args.out}")


def cmd_adapt_kmeans(args):
    emb = corpus.read_embedding_set(args.emb)
    labels = spherical_kmeans(emb, args.k, seed=args.seed, max_iter=args.max_iter)
    write_pseudo_labels(labels, args.out)
    print(f"k-means: K={labels.k} inertia={labels.inertia:.6f} "
          f"iterations={len(labels.inertia_history)} -> {args.out}")


def cmd_adapt_cohort(args):
    emb = corpus.read_embedding_set(args.emb)
    labels = read_pseudo_labels(args.labels)
    cohort = build_pseudo_cohort(emb, labels)
    corpus.write_embedding_set(cohort.embeddings, args.out)
    print(f"pseudo cohort of {cohort.size} -> {args.out}")


def cmd_dlg_fit(args):
    values = []
    with open(args.losses, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            values.append(float(fields[-1]))
    model = fit_loss_gmm(np.array(values))
    tau = gate_threshold(model)
    print(gate_diagnostics(model))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(f"pi1={model.weights[0]:.17g}\npi2={model.weights[1]:.17g}\n"
                    f"mu1={model.means[0]:.17g}\nmu2={model.means[1]:.17g}\n"
                    f"var1={model.variances[0]:.17g}\nvar2={model.variances[1]:.17g}\n"
                    f"tau={tau:.17g}\nlog_likelihood={model.log_likelihood:.17g}\n")
        print(f"gate model -> {args.out}")


# ---------------------------------------------------------------------------
# train / run / config
# ---------------------------------------------------------------------------

def cmd_train(args):
    from .losses import large_margin_config
    from .protocol import (adaptation_train_config, run_adaptation_protocol,
                           run_chain_protocol, stage1)
    from .synthdata import adaptation_benchmark_config, make_benchmark
    from .training import finetune

    cfg = cfgmod.config_load(_config_path(args))
    seed = args.seed if args.seed is not None else cfg.get("run", "seed")
    out = args.out or cfg.get("run", "out-dir")
    os.makedirs(out, exist_ok=True)

    if args.stage == "supervised":
        bench = make_benchmark(seed, adaptation_benchmark_config())
        res = stage1(bench, seed, cfg.get("train", "embedding-dim"),
                     epochs=cfg.get("train", "epochs"),
                     batch_size=cfg.get("train", "batch-size"))
        res.extractor.save(os.path.join(out, "model.stage1.mat"))
        print(f"stage-I loss {res.history[0]['loss']:.4f} -> {res.final_loss:.4f}; "
              f"model.stage1.mat in {out}")
    elif args.stage == "finetune":
        from .losses import LossConfig
        from .training import TrainConfig
        bench = make_benchmark(seed, adaptation_benchmark_config())
        res = stage1(bench, seed, cfg.get("train", "embedding-dim"),
                     epochs=cfg.get("train", "epochs"),
                     batch_size=cfg.get("train", "batch-size"))
        lm = large_margin_config(LossConfig(margin_type=cfg.get("loss", "margin-type")))
        tcfg = TrainConfig(epochs=max(1, cfg.get("train", "epochs") // 4),
                           batch_size=cfg.get("train", "batch-size"),
                           lr_initial=0.01, lr_final=1e-5,
                           segment_seconds=6.0, seed=seed)
        ft = finetune(res.extractor, res.head, bench.source_train, tcfg, lm)
        ft.extractor.save(os.path.join(out, "model.finetuned.mat"))
        print(f"fine-tune loss {ft.history[0]['loss']:.4f} -> {ft.final_loss:.4f}; "
              f"model.finetuned.mat in {out}")
    else:  # adapt
        run = run_adaptation_protocol(seed, epochs=cfg.get("train", "adapt-epochs"))
        for mode, eer in run.eers.items():
            print(f"{mode}: EER={100 * eer:.3f}%")
        with open(os.path.join(out, "adaptation.kv"), "w", encoding="utf-8") as f:
            for mode, eer in run.eers.items():
                f.write(f"{mode.lower().replace('+', '_')}.eer={eer:.17g}\n")
        print(f"adaptation.kv in {out}")


def cmd_run(args):
    result = run_pipeline(args.kind, _config_path(args), out_dir=args.out,
                          seed=args.seed, jobs=args.jobs, dry_run=args.dry_run)
    if args.dry_run:
        print("stage plan:")
        for i, stage in enumerate(result.plan, start=1):
            print(f"  {i}. {stage}")
        print("artifacts: " + " ".join(result.artifacts))
        return
    for label, report in result.metrics.items():
        print(f"{label}: {report.as_text()}")
    print(f"artifacts in {result.out_dir}: {len(result.artifacts)} file(s)")


def cmd_config(args):
    if args.action == "dump-defaults":
        print(cfgmod.dump_defaults())
    else:
        cfg = cfgmod.config_load(_config_path(args))
        print(f"{_config_path(args)}: valid")
        if args.verbose:
            print(cfgmod.dump_config(cfg))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svkit",
                                description="speaker-verification back-end toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    emb = sub.add_parser("emb", help="embedding file packing").add_subparsers(
        dest="action", required=True)
    pk = emb.add_parser("pack", help="text `name v1 v2 ...` -> binary set")
    pk.add_argument("--input", required=True)
    pk.add_argument("--output", required=True)
    pk.set_defaults(fn=cmd_emb_pack)
    up = emb.add_parser("unpack", help="binary set -> text")
    up.add_argument("--input", required=True)
    up.add_argument("--output", required=True)
    up.set_defaults(fn=cmd_emb_unpack)

    tr = sub.add_parser("trials", help="trial list tools").add_subparsers(
        dest="action", required=True)
    tv = tr.add_parser("validate")
    tv.add_argument("--trials", required=True)
    tv.add_argument("--emb")
    tv.set_defaults(fn=cmd_trials_validate)

    ft = sub.add_parser("feat", help="feature pipeline").add_subparsers(
        dest="action", required=True)
    fa = ft.add_parser("augment", help="offline plan + per-utterance features")
    fa.add_argument("--config")
    fa.add_argument("--manifest", required=True)
    fa.add_argument("--out", required=True)
    fa.add_argument("--seed", type=int)
    fa.set_defaults(fn=cmd_feat_augment)

    sc = sub.add_parser("score", help="scoring chain").add_subparsers(
        dest="action", required=True)
    co = sc.add_parser("cosine")
    co.add_argument("--emb", required=True)
    co.add_argument("--trials", required=True)
    co.add_argument("--out", required=True)
    co.set_defaults(fn=cmd_score_cosine)
    an = sc.add_parser("asnorm")
    an.add_argument("--scores", required=True)
    an.add_argument("--emb", required=True)
    an.add_argument("--cohort", required=True)
    an.add_argument("--cohort-speakers")
    an.add_argument("--top-n", type=int, default=600)
    an.add_argument("--out", required=True)
    an.set_defaults(fn=cmd_score_asnorm)
    ca = sc.add_parser("calibrate")
    ca.add_argument("--train-scores", required=True)
    ca.add_argument("--train-trials", required=True)
    ca.add_argument("--scores", required=True)
    ca.add_argument("--durations")
    ca.add_argument("--out", required=True)
    ca.set_defaults(fn=cmd_score_calibrate)
    fu = sc.add_parser("fuse")
    fu.add_argument("--scores", nargs="+", required=True)
    fu.add_argument("--weights", default="equal",
                    help="`equal`, `learn`, or a comma list")
    fu.add_argument("--trials", help="labeled trials for --weights learn")
    fu.add_argument("--out", required=True)
    fu.set_defaults(fn=cmd_score_fuse)
    me = sc.add_parser("metrics")
    me.add_argument("--scores", required=True)
    me.add_argument("--trials", required=True)
    me.add_argument("--p-target", type=float, default=0.05)
    me.add_argument("--c-miss", type=float, default=1.0)
    me.add_argument("--c-fa", type=float, default=1.0)
    me.add_argument("--out")
    me.set_defaults(fn=cmd_score_metrics)

    ad = sub.add_parser("adapt", help="domain adaptation").add_subparsers(
        dest="action", required=True)
    st = ad.add_parser("stats")
    st.add_argument("--emb", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--tag", default="target")
    st.set_defaults(fn=cmd_adapt_stats)
    ap = ad.add_parser("apply")
    ap.add_argument("--emb", required=True)
    ap.add_argument("--stats", required=True)
    ap.add_argument("--out", required=True)
    ap.set_defaults(fn=cmd_adapt_apply)
    km = ad.add_parser("kmeans")
    km.add_argument("--emb", required=True)
    km.add_argument("--k", type=int, required=True)
    km.add_argument("--seed", type=int, default=0)
    km.add_argument("--max-iter", type=int, default=100)
    km.add_argument("--out", required=True)
    km.set_defaults(fn=cmd_adapt_kmeans)
    ch = ad.add_parser("cohort")
    ch.add_argument("--emb", required=True)
    ch.add_argument("--labels", required=True)
    ch.add_argument("--out", required=True)
    ch.set_defaults(fn=cmd_adapt_cohort)

    dl = sub.add_parser("dlg", help="dynamic loss gate").add_subparsers(
        dest="action", required=True)
    df = dl.add_parser("fit", help="fit the 2-component loss GMM")
    df.add_argument("--losses", required=True, help="text file, `name value` lines")
    df.add_argument("--out")
    df.set_defaults(fn=cmd_dlg_fit)

    tn = sub.add_parser("train", help="desk-scale training harness")
    tn.add_argument("stage", choices=("supervised", "finetune", "adapt"))
    tn.add_argument("--config")
    tn.add_argument("--seed", type=int)
    tn.add_argument("--out")
    tn.set_defaults(fn=cmd_train)

    rn = sub.add_parser("run", help="full pipeline")
    rn.add_argument("--kind", choices=PIPELINE_KINDS, required=True)
    rn.add_argument("--config")
    rn.add_argument("--seed", type=int)
    rn.add_argument("--jobs", type=int)
    rn.add_argument("--out")
    rn.add_argument("--dry-run", action="store_true")
    rn.set_defaults(fn=cmd_run)

    cf = sub.add_parser("config", help="configuration tools")
    cf.add_argument("action", choices=("dump-defaults", "validate"))
    cf.add_argument("--config")
    cf.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
