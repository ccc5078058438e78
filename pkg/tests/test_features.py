import numpy as np
import pytest

from svkit.corpus import Manifest, ManifestEntry
from svkit.errors import DataError, NumericsError
from svkit.features import (AugmentConfig, Waveform, apply_noise, derived_speaker,
                            fbank, offline_plan, online_augment, sliding_cmn,
                            speed_perturb, synth_noise_assets)
from svkit.rand import derive_rng


def tone(n=16000, sr=16000, freq=220.0, amp=0.5):
    t = np.arange(n) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


class TestSpeedPerturb:
    def test_identity_ratio(self):
        w = tone()
        assert speed_perturb(w, 1.0) is w

    def test_length_ratio_11(self):
        out = speed_perturb(tone(16000), 1.1)
        assert abs(len(out) - round(16000 / 1.1)) <= 1

    def test_length_ratio_09(self):
        out = speed_perturb(tone(16000), 0.9)
        assert abs(len(out) - round(16000 / 0.9)) <= 1

    def test_compose_restores_length(self):
        w = tone(12000)
        back = speed_perturb(speed_perturb(w, 1.1), 1 / 1.1)
        assert abs(len(back) - len(w)) <= 2

    def test_derived_speaker_count(self):
        # 5994 speakers x ratios {1.0, 1.1, 0.9} -> 17,982 derived speakers
        speakers = [f"spk{i}" for i in range(5994)]
        derived = {derived_speaker(s, r) for s in speakers for r in (1.0, 1.1, 0.9)}
        assert len(derived) == 17_982

    def test_rejects_bad_ratio(self):
        with pytest.raises(DataError):
            speed_perturb(tone(), 0.0)


class TestApplyNoise:
    def test_infinite_snr_guard(self, rng):
        w = tone()
        noisy = apply_noise(w, "noise", Waveform(rng.standard_normal(16000)), 100.0, rng)
        np.testing.assert_allclose(noisy.samples, w.samples, rtol=1e-6)

    def test_unit_impulse_reverb_identity(self):
        w = tone()
        ir = Waveform(np.array([1.0, 0.0, 0.0]))
        out = apply_noise(w, "reverb", ir)
        np.testing.assert_array_equal(out.samples, w.samples)

    def test_snr_zero_gain_one(self, rng):
        # equal-power signal and asset at 0 dB: the mixed noise term keeps unit gain
        w = tone(8000, amp=1.0)
        asset = Waveform(np.sin(2 * np.pi * 95.0 * np.arange(8000) / 16000))
        out = apply_noise(w, "music", asset, 0.0, rng)
        noise_term = out.samples - w.samples
        gain = np.sqrt(np.mean(noise_term ** 2) / np.mean(asset.samples ** 2))
        assert abs(gain - 1.0) < 1e-6

    def test_zero_power_signal(self, rng):
        with pytest.raises(NumericsError, match="zero-power"):
            apply_noise(Waveform(np.zeros(100)), "noise", tone(100), 10.0, rng)

    def test_zero_power_asset(self, rng):
        with pytest.raises(NumericsError, match="zero-power"):
            apply_noise(tone(100), "noise", Waveform(np.zeros(100)), 10.0, rng)

    def test_short_asset_wraps(self, rng):
        out = apply_noise(tone(1000), "babble", Waveform(rng.standard_normal(100)),
                          15.0, rng)
        assert len(out) == 1000


class TestFbank:
    def test_frame_count_one_second(self):
        feats = fbank(tone(16000))
        assert feats.frames.shape == (98, 80)  # 1 + (16000-400)//160

    def test_all_zero_waveform_constant(self):
        feats = fbank(Waveform(np.zeros(4000)))
        assert np.all(feats.frames == np.log(1e-10))

    def test_amplitude_doubling_adds_log4(self):
        w = tone(4000, amp=0.3)
        f1 = fbank(w)
        f2 = fbank(Waveform(2.0 * w.samples))
        mask = f1.frames > np.log(1e-10) + 1.0  # stay away from the floor
        diff = (f2.frames - f1.frames)[mask]
        np.testing.assert_allclose(diff, np.log(4.0), atol=1e-4)

    def test_shift_covariance(self):
        rng = derive_rng(3, "shift")
        w = Waveform(rng.standard_normal(4000))
        shifted = Waveform(w.samples[160:])
        a = fbank(w).frames
        b = fbank(shifted).frames
        np.testing.assert_allclose(a[1:b.shape[0] + 1], b, atol=1e-5)

    def test_too_short(self):
        with pytest.raises(DataError, match="short"):
            fbank(Waveform(np.zeros(100)))


class TestSlidingCmn:
    def make(self, t, d=4, seed=0):
        return fbank_like(derive_rng(seed, "cmn").standard_normal((t, d)))

    def test_short_input_equals_global_mean(self):
        x = derive_rng(0, "cmn").standard_normal((120, 6))
        out = sliding_cmn(fbank_like(x), window=300)
        np.testing.assert_allclose(out.frames.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.frames, x - x.mean(axis=0), atol=1e-12)

    def test_constant_input_zeroed(self):
        x = np.full((50, 3), 7.5)
        out = sliding_cmn(fbank_like(x), window=10)
        np.testing.assert_array_equal(out.frames, np.zeros_like(x))

    def test_window_one_zeroes_everything(self):
        x = derive_rng(1, "cmn").standard_normal((40, 2))
        out = sliding_cmn(fbank_like(x), window=1)
        np.testing.assert_allclose(out.frames, 0.0, atol=1e-12)

    def test_window_means_zero_when_covering(self):
        x = derive_rng(2, "cmn").standard_normal((250, 5))
        out = sliding_cmn(fbank_like(x), window=300)
        assert np.abs(out.frames.mean(axis=0)).max() <= 1e-6


def fbank_like(x):
    from svkit.features import FeatureMatrix
    return FeatureMatrix(np.asarray(x, dtype=np.float64))


class TestOnlineAugment:
    CFG = dict(segment_seconds=0.05, sample_rate=16000)

    def test_disabled_augmentation_is_fbank_cmn_of_crop(self):
        cfg = AugmentConfig(speed_ratios=(1.0,), noise_probability=0.0, **self.CFG)
        w = tone(4000)
        feats, trace = online_augment(w, cfg, derive_rng(5, "aug"), return_trace=True)
        assert trace.speed_ratio == 1.0 and trace.noise_kind is None
        seg = Waveform(w.samples[trace.crop_start:trace.crop_start + 800])
        expected = sliding_cmn(fbank(seg), window=cfg.cmn_window)
        np.testing.assert_array_equal(feats.frames, expected.frames)

    def test_fixed_seed_reproducible(self):
        cfg = AugmentConfig(**self.CFG)
        w = tone(4000)
        f1 = online_augment(w, cfg, derive_rng(7, "aug"))
        f2 = online_augment(w, cfg, derive_rng(7, "aug"))
        np.testing.assert_array_equal(f1.frames, f2.frames)

    def test_output_dim(self):
        cfg = AugmentConfig(**self.CFG)
        feats = online_augment(tone(4000), cfg, derive_rng(9, "aug"))
        assert feats.dim == 80

    def test_wrap_pad_short_input(self):
        cfg = AugmentConfig(speed_ratios=(1.0,), noise_probability=0.0,
                            segment_seconds=0.1, sample_rate=16000)
        feats = online_augment(tone(500), cfg, derive_rng(11, "aug"))
        assert feats.num_frames == 1 + (1600 - 400) // 160

    def test_noise_rate_statistic(self):
        # 10,000 seeded draws land within 0.6 +/- 0.02
        cfg = AugmentConfig(segment_seconds=0.025, sample_rate=16000,
                            assets=synth_noise_assets(("babble", "noise", "music",
                                                       "reverb"), 16000, 0, 0.25))
        w = tone(2000)
        hits = 0
        for i in range(10_000):
            _, trace = online_augment(w, cfg, derive_rng(1234, "rate", i),
                                      return_trace=True)
            hits += trace.noise_kind is not None
        assert abs(hits / 10_000 - 0.6) <= 0.02


class TestOfflinePlan:
    def manifest(self, n):
        return Manifest([ManifestEntry(f"u{i}", f"s{i % 7}", "source", 3.0)
                         for i in range(n)])

    def test_fifteen_entries_per_utterance(self):
        plan = offline_plan(self.manifest(1), AugmentConfig())
        assert len(plan) == 15

    def test_counts_scale(self):
        plan = offline_plan(self.manifest(9), AugmentConfig())
        assert len(plan) == 135
        assert len(plan.speakers()) == 3 * 7

    def test_paper_scale_arithmetic(self):
        # 1,092,009 utterances -> 3,276,027 speed copies -> 16,380,135 entries
        per_utt = len(offline_plan(self.manifest(1), AugmentConfig()))
        ratios = len(AugmentConfig().speed_ratios)
        assert 1_092_009 * ratios == 3_276_027
        assert 1_092_009 * per_utt == 16_380_135

    def test_single_ratio_four_noises(self):
        cfg = AugmentConfig(speed_ratios=(1.0,))
        plan = offline_plan(self.manifest(1), cfg)
        assert len(plan) == 5
        assert sorted(e.augment for e in plan.entries) == [
            "babble", "clean", "music", "noise", "reverb"]

    def test_entries_tagged(self):
        plan = offline_plan(self.manifest(1), AugmentConfig())
        speeds = {e.speed for e in plan.entries}
        assert speeds == {1.0, 1.1, 0.9}
        clean = [e for e in plan.entries if e.augment == "clean"]
        assert len(clean) == 3
