import math

import numpy as np
import pytest

from conftest import apl_instance, margin_instance
from svkit.errors import ConfigError, DataError
from svkit.losses import (AplBatch, ClassifierHead, LossConfig, MarginBatch,
                          angular_prototypical_loss, class_cosines, finite_diff_check,
                          joint_loss, large_margin_config, margin_softmax_loss)


def margin_op(labels, cfg):
    def op(params):
        head = ClassifierHead(params["weights"], "source")
        bundle = margin_softmax_loss(params["emb"], labels, head, cfg)
        return bundle.loss, {"emb": bundle.grad_emb, "weights": bundle.grad_weights}
    return op


def scalar_margin_oracle(emb, labels, weights, cfg):
    """Independent per-sample re-derivation via angles and explicit softmax."""
    total = 0.0
    C = weights.shape[0]
    for i in range(emb.shape[0]):
        e = emb[i] / np.linalg.norm(emb[i])
        cosines = []
        for c in range(C):
            best = -2.0
            for k in range(weights.shape[1]):
                w = weights[c, k] / np.linalg.norm(weights[c, k])
                best = max(best, float(e @ w))
            cosines.append(best)
        y = labels[i]
        logits = list(cosines)
        if cfg.intertopk_penalty > 0:
            order = sorted((c for c in range(C) if c != y),
                           key=lambda c: (-cosines[c], c))
            for c in order[:cfg.intertopk_k]:
                logits[c] = cosines[c] + cfg.intertopk_penalty
        tc = cosines[y]
        if cfg.margin_type == "aam":
            if tc >= math.cos(math.pi - cfg.margin):
                logits[y] = math.cos(math.acos(max(-1.0, min(1.0, tc))) + cfg.margin)
            else:
                logits[y] = tc - cfg.margin * math.sin(cfg.margin)
        else:
            logits[y] = tc - cfg.margin
        z = [cfg.scale * v for v in logits]
        m = max(z)
        total += -(z[y] - m - math.log(sum(math.exp(v - m) for v in z)))
    return total / emb.shape[0]


class TestMarginSoftmax:
    def test_margins_off_equals_plain_softmax_ce(self, rng):
        emb = rng.standard_normal((6, 5))
        labels = rng.integers(0, 4, 6)
        head = ClassifierHead.init_random(4, 1, 5, rng)
        cfg = LossConfig(margin=0.0, intertopk_penalty=0.0, subcenters=1, scale=7.0)
        bundle = margin_softmax_loss(emb, labels, head, cfg)
        logits = 7.0 * class_cosines(emb, head)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        expected = -logp[np.arange(6), labels].mean()
        assert bundle.loss == pytest.approx(expected, abs=1e-12)

    def test_hand_built_case_matches_scalar_oracle(self):
        # N=2, C=2, D=2 on explicit angles, checked against the scalar oracle
        emb = np.array([[1.0, 0.0],
                        [math.cos(1.0), math.sin(1.0)]]) * np.array([[1.7], [0.4]])
        labels = np.array([0, 1])
        weights = np.array([[[math.cos(0.2), math.sin(0.2)]],
                            [[math.cos(1.3), math.sin(1.3)]]])
        cfg = LossConfig(margin_type="aam", scale=4.0, margin=0.3, subcenters=1,
                         intertopk_penalty=0.1, intertopk_k=1)
        bundle = margin_softmax_loss(emb, labels, ClassifierHead(weights), cfg)
        expected = scalar_margin_oracle(emb, labels, weights, cfg)
        assert bundle.loss == pytest.approx(expected, abs=1e-10)
        # frozen from the oracle above
        assert bundle.loss == pytest.approx(0.37986610465552295, abs=1e-10)

    def test_stage_one_defaults_accepted(self):
        cfg = LossConfig(margin_type="aam", scale=32.0, margin=0.2, subcenters=3,
                         intertopk_penalty=0.06, intertopk_k=5)
        assert cfg.scale == 32.0 and cfg.margin == 0.2

    def test_am_matches_scalar_oracle(self, rng):
        emb, labels, head, _ = margin_instance(rng, margin_type="am")
        cfg = LossConfig(margin_type="am", scale=5.0, margin=0.25, subcenters=3,
                         intertopk_penalty=0.06, intertopk_k=5)
        bundle = margin_softmax_loss(emb, labels, head, cfg)
        assert bundle.loss == pytest.approx(
            scalar_margin_oracle(emb, labels, head.weights, cfg), abs=1e-10)

    def test_margin_monotonicity(self, rng):
        emb = rng.standard_normal((10, 6))
        labels = rng.integers(0, 5, 10)
        head = ClassifierHead.init_random(5, 3, 6, rng)
        for margin_type in ("aam", "am"):
            losses = [margin_softmax_loss(
                emb, labels, head,
                LossConfig(margin_type=margin_type, margin=m,
                           intertopk_penalty=0.0)).loss
                for m in (0.0, 0.1, 0.2, 0.35, 0.5)]
            assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_intertopk_zero_bit_identical(self, rng):
        emb = rng.standard_normal((8, 6))
        labels = rng.integers(0, 10, 8)
        head = ClassifierHead.init_random(10, 3, 6, rng)
        on = margin_softmax_loss(emb, labels, head,
                                 LossConfig(intertopk_penalty=0.0, intertopk_k=5))
        off = margin_softmax_loss(emb, labels, head, LossConfig(intertopk_penalty=0.0))
        assert on.loss == off.loss
        np.testing.assert_array_equal(on.grad_emb, off.grad_emb)
        np.testing.assert_array_equal(on.grad_weights, off.grad_weights)

    def test_subcenter_one_bit_identical_to_plain(self, rng):
        # K=1 must follow the exact same arithmetic as a formula with no
        # subcenter axis at all
        emb = rng.standard_normal((8, 6))
        labels = rng.integers(0, 10, 8)
        head1 = ClassifierHead.init_random(10, 1, 6, rng)
        cfg = LossConfig(subcenters=1)
        bundle = margin_softmax_loss(emb, labels, head1, cfg)

        e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        w = head1.weights[:, 0, :]
        w = w / np.linalg.norm(w, axis=1, keepdims=True)
        plain_cos = e @ w.T
        np.testing.assert_array_equal(class_cosines(emb, head1), plain_cos)
        assert np.isfinite(bundle.loss)

    def test_zero_norm_embedding_rejected(self, rng):
        emb = rng.standard_normal((3, 4))
        emb[1] = 0.0
        head = ClassifierHead.init_random(3, 1, 4, rng)
        with pytest.raises(DataError, match="zero-norm"):
            margin_softmax_loss(emb, np.array([0, 1, 2]), head, LossConfig(subcenters=1))

    def test_label_out_of_range(self, rng):
        head = ClassifierHead.init_random(3, 1, 4, rng)
        with pytest.raises(DataError, match="range"):
            margin_softmax_loss(rng.standard_normal((2, 4)), np.array([0, 3]), head,
                                LossConfig(subcenters=1))

    def test_soft_targets_and_weights(self, rng):
        emb = rng.standard_normal((4, 5))
        labels = rng.integers(0, 3, 4)
        head = ClassifierHead.init_random(3, 1, 5, rng)
        cfg = LossConfig(subcenters=1, intertopk_penalty=0.0)
        soft = np.zeros((4, 3))
        soft[np.arange(4), labels] = 1.0
        weights = np.ones(4)
        a = margin_softmax_loss(emb, labels, head, cfg)
        b = margin_softmax_loss(emb, labels, head, cfg, soft_targets=soft,
                                sample_weights=weights)
        assert a.loss == b.loss
        # dropping one sample equals the mean over the rest
        weights2 = np.array([1.0, 1.0, 0.0, 1.0])
        c = margin_softmax_loss(emb, labels, head, cfg, sample_weights=weights2)
        kept = margin_softmax_loss(emb[[0, 1, 3]], labels[[0, 1, 3]], head, cfg)
        assert c.loss == pytest.approx(kept.loss, abs=1e-12)

    def test_large_margin_config(self):
        lm = large_margin_config(LossConfig(margin_type="aam"))
        assert lm.margin == 0.5 and lm.intertopk_penalty == 0.0
        lm = large_margin_config(LossConfig(margin_type="am", margin=0.2))
        assert lm.margin == 0.35


class TestMarginGradients:
    @pytest.mark.parametrize("margin_type", ["aam", "am"])
    @pytest.mark.parametrize("subcenters", [1, 3])
    @pytest.mark.parametrize("penalty", [0.0, 0.06])
    def test_finite_differences(self, rng, margin_type, subcenters, penalty):
        worst = 0.0
        for _ in range(20):
            emb, labels, head, cfg = margin_instance(
                rng, margin_type=margin_type, subcenters=subcenters,
                intertopk_penalty=penalty)
            err = finite_diff_check(margin_op(labels, cfg),
                                    {"emb": emb, "weights": head.weights})
            worst = max(worst, err)
        assert worst < 1e-4

    def test_soft_target_gradients(self, rng):
        emb, labels, head, cfg = margin_instance(rng, margin_type="am", subcenters=1,
                                                 intertopk_penalty=0.0)
        soft = rng.dirichlet(np.ones(10), size=8)
        weights = rng.uniform(0.2, 1.0, 8)

        def op(params):
            h = ClassifierHead(params["weights"], "source")
            bundle = margin_softmax_loss(params["emb"], labels, h, cfg,
                                         soft_targets=soft, sample_weights=weights)
            return bundle.loss, {"emb": bundle.grad_emb, "weights": bundle.grad_weights}

        assert finite_diff_check(op, {"emb": emb, "weights": head.weights}) < 1e-4


class TestAngularPrototypical:
    def test_orthogonal_speakers_closed_form(self):
        # queries equal to own prototypes, orthogonal across speakers, w=10, b=0
        batch = np.zeros((2, 2, 4))
        batch[0, :, 0] = 1.0
        batch[1, :, 1] = 1.0
        bundle = angular_prototypical_loss(batch, 10.0, 0.0)
        assert bundle.loss == pytest.approx(math.log(1 + math.exp(-10.0)), rel=1e-12)

    def test_identical_embeddings_log_n(self, rng):
        v = rng.standard_normal(5)
        batch = np.tile(v, (4, 2, 1))
        bundle = angular_prototypical_loss(batch, 8.0, -1.0)
        assert bundle.loss == pytest.approx(math.log(4), rel=1e-12)

    def test_scale_invariance(self, rng):
        batch, w, b = apl_instance(rng)
        a = angular_prototypical_loss(batch, w, b)
        c = angular_prototypical_loss(5.0 * batch, w, b)
        assert a.loss == pytest.approx(c.loss, rel=1e-12)

    def test_needs_two_speakers(self, rng):
        with pytest.raises(DataError, match="2 speakers"):
            angular_prototypical_loss(rng.standard_normal((1, 2, 4)), 10.0, -5.0)

    def test_finite_differences(self, rng):
        worst = 0.0
        for _ in range(20):
            batch, w, b = apl_instance(rng)

            def op(params):
                bundle = angular_prototypical_loss(params["batch"],
                                                   float(params["w"]),
                                                   float(params["b"]))
                return bundle.loss, {"batch": bundle.grad_emb,
                                     "w": bundle.grad_w, "b": bundle.grad_b}

            worst = max(worst, finite_diff_check(
                op, {"batch": batch, "w": np.float64(w), "b": np.float64(b)}))
        assert worst < 1e-4


class TestJointLoss:
    def source_batch(self, rng, n=6, classes=4, dim=5):
        emb = rng.standard_normal((n, dim))
        labels = rng.integers(0, classes, n)
        head = ClassifierHead.init_random(classes, 3, dim, rng)
        return MarginBatch(emb, labels, head, LossConfig(intertopk_k=3))

    def test_empty_target_equals_source(self, rng):
        source = self.source_batch(rng)
        bundle = joint_loss(source, None, "APL")
        src_only = margin_softmax_loss(source.emb, source.labels, source.head,
                                       source.cfg)
        assert bundle.loss == src_only.loss
        np.testing.assert_array_equal(bundle.source.grad_emb, src_only.grad_emb)
        assert bundle.target is None

    def test_additivity_exact(self, rng):
        source = self.source_batch(rng)
        target = AplBatch(rng.standard_normal((4, 2, 5)), 10.0, -5.0)
        bundle = joint_loss(source, target, "APL")
        src = margin_softmax_loss(source.emb, source.labels, source.head, source.cfg)
        tgt = angular_prototypical_loss(target.pairs, 10.0, -5.0)
        assert bundle.loss == src.loss + tgt.loss
        assert bundle.loss_source == src.loss and bundle.loss_target == tgt.loss

    def test_apl_mode_routes_to_prototypical(self, rng):
        source = self.source_batch(rng)
        target = AplBatch(rng.standard_normal((4, 2, 5)), 10.0, -5.0)
        bundle = joint_loss(source, target, "APL")
        expected = angular_prototypical_loss(target.pairs, 10.0, -5.0)
        assert bundle.loss_target == expected.loss

    def test_tcl_requires_labels(self, rng):
        source = self.source_batch(rng)
        target = MarginBatch(rng.standard_normal((4, 5)), None,
                             ClassifierHead.init_random(3, 3, 5, rng, "target"),
                             LossConfig(intertopk_k=2))
        with pytest.raises(DataError, match="pseudo labels"):
            joint_loss(source, target, "TCL")

    def test_ocl_requires_offset(self, rng):
        source = self.source_batch(rng)
        target = MarginBatch(rng.standard_normal((4, 5)),
                             rng.integers(0, 2, 4), None, LossConfig(intertopk_k=2))
        with pytest.raises(ConfigError, match="n_source_classes"):
            joint_loss(source, target, "OCL")

    def test_ocl_symmetric_setup_doubles(self, rng):
        # identical source and target batches on a block-symmetric shared head:
        # the two halves see mirror-image geometry, so L = 2 * L_source
        dim, classes = 6, 3
        emb = rng.standard_normal((5, dim))
        labels = rng.integers(0, classes, 5)
        block = ClassifierHead.init_random(classes, 2, dim, rng).weights
        shared = ClassifierHead(np.concatenate([block, block]), "source")
        cfg = LossConfig(subcenters=2, intertopk_penalty=0.0)
        source = MarginBatch(emb, labels, shared, cfg)
        target = MarginBatch(emb, labels, None, cfg)
        bundle = joint_loss(source, target, "OCL", n_source_classes=classes)
        assert bundle.loss_target == pytest.approx(bundle.loss_source, rel=1e-12)
        assert bundle.loss == pytest.approx(2.0 * bundle.loss_source, rel=1e-12)

    def test_ocl_one_hot_mass_stays_in_range(self, rng):
        # target samples may repel source rows (positive softmax pressure) but
        # their one-hot pull lands only on target-range columns
        dim, src_classes, tgt_classes = 5, 4, 3
        shared = ClassifierHead.init_random(src_classes + tgt_classes, 2, dim, rng)
        cfg = LossConfig(subcenters=2, intertopk_penalty=0.0)
        source = MarginBatch(rng.standard_normal((6, dim)),
                             rng.integers(0, src_classes, 6), shared, cfg)
        target = MarginBatch(rng.standard_normal((6, dim)),
                             rng.integers(0, tgt_classes, 6), None, cfg)
        bundle = joint_loss(source, target, "OCL", n_source_classes=src_classes)
        assert np.all(bundle.target.grad_logits[:, :src_classes] >= 0.0)
        assert np.all(bundle.source.grad_logits[:, src_classes:] >= 0.0)


class TestFiniteDiffHarness:
    def test_quadratic_self_test(self, rng):
        x = rng.standard_normal(12)

        def op(params):
            v = params["x"]
            return float(v @ v), {"x": 2.0 * v}

        assert finite_diff_check(op, {"x": x}) < 1e-8
