"""Waveform augmentation and filterbank feature pipeline.

Online processing runs five steps in a fixed order: sample a speed ratio,
decide on noise augmentation (probability 0.6) and sample a noise type, crop a
training segment, extract 80-dim log-mel filterbank features, and apply
sliding-window mean normalization.  The offline plan expands a manifest
15-fold: three speed ratios, each with one clean copy and four noise copies.
No voice activity detection exists anywhere in this pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from .corpus import Manifest, ManifestEntry
from .errors import DataError, NumericsError
from .rand import as_rng, derive_rng

ADDITIVE_KINDS = ("babble", "noise", "music")
NOISE_KINDS = ADDITIVE_KINDS + ("reverb",)

# SNR sampling ranges in dB per additive kind; reverb has no SNR
DEFAULT_SNR_RANGES = {"babble": (13.0, 20.0), "noise": (0.0, 15.0), "music": (5.0, 15.0)}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, D)
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"feature matrix must be (T>=1, D), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("feature matrix contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class AugmentConfig:
    speed_ratios: tuple = (1.0, 1.1, 0.9)
    noise_probability: float = 0.6
    noise_types: tuple = NOISE_KINDS
    segment_seconds: float = 2.0
    sample_rate: int = 16000
    num_mel_bins: int = 80
    cmn_window: int = 300
    snr_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SNR_RANGES))
    # kind -> list of Waveform; synthesized deterministically from `seed` when absent
    assets: dict | None = None
    seed: int = 0

    def __post_init__(self):
        if any(r <= 0 for r in self.speed_ratios):
            raise DataError(f"speed ratios must be positive: {self.speed_ratios}")
        if not 0.0 <= self.noise_probability <= 1.0:
            raise DataError(f"noise probability must lie in [0,1]: {self.noise_probability}")
        unknown = set(self.noise_types) - set(NOISE_KINDS)
        if unknown:
            raise DataError(f"unknown noise types: {sorted(unknown)}")

    def noise_assets(self) -> dict:
        if self.assets is None:
            self.assets = synth_noise_assets(self.noise_types, self.sample_rate, self.seed)
        return self.assets


def synth_noise_assets(kinds, sample_rate: int, seed: int, seconds: float = 2.0) -> dict:
    """Stand-in noise bank: shaped white noise per additive kind, decaying
    impulse responses for reverb.  Real MUSAN/RIR corpora plug in through
    AugmentConfig.assets with the same shape."""
    assets = {}
    n = int(round(seconds * sample_rate))
    for kind in kinds:
        rng = derive_rng(seed, "noise-asset", kind)
        if kind == "reverb":
            irs = []
            for _ in range(4):
                length = int(rng.integers(sample_rate // 100, sample_rate // 20))
                decay = np.exp(-np.arange(length) / (length / 5.0))
                ir = rng.standard_normal(length) * decay
                ir[0] = 1.0
                irs.append(Waveform(ir, sample_rate))
            assets[kind] = irs
        else:
            assets[kind] = [Waveform(rng.standard_normal(n), sample_rate) for _ in range(4)]
    return assets


# ---------------------------------------------------------------------------
# speed perturbation
# ---------------------------------------------------------------------------

def speed_perturb(w: Waveform, ratio: float) -> Waveform:
    """Change playback speed by `ratio` via Kaiser-windowed polyphase resampling.

    Output length is round(len/ratio) within one sample; ratio 1.0 returns the
    input unchanged.
    """
    if not (ratio > 0) or not np.isfinite(ratio):
        raise DataError(f"speed ratio must be positive and finite, got {ratio}")
    if ratio == 1.0:
        return w
    from fractions import Fraction

    frac = Fraction(ratio).limit_denominator(1000)
    # playing at rate*ratio: resample by 1/ratio, keep the nominal sample rate
    out = resample_poly(w.samples, up=frac.denominator, down=frac.numerator)
    return Waveform(out, w.sample_rate)


def derived_speaker(speaker_id: str, ratio: float) -> str:
    """Perturbed audio counts as a new speaker; ratio 1.0 keeps the identity."""
    if ratio == 1.0:
        return speaker_id
    return f"{speaker_id}#sp{ratio:g}"


def derived_utt(utt_id: str, ratio: float, augment: str = "clean") -> str:
    out = utt_id if ratio == 1.0 else f"{utt_id}#sp{ratio:g}"
    if augment != "clean":
        out = f"{out}#{augment}"
    return out


# ---------------------------------------------------------------------------
# noise and reverberation
# ---------------------------------------------------------------------------

def apply_noise(w: Waveform, kind: str, asset: Waveform, snr_db: float = 0.0,
                rng=None) -> Waveform:
    """Mix additive noise at the requested SNR, or convolve an impulse response.

    Additive kinds scale a random asset segment by the gain that solves
    10*log10(P_signal / (g^2 * P_asset)) = snr_db on mean-square powers.
    snr_db >= 100 is treated as the infinite-SNR limit (no-op).  Reverb
    convolves with the impulse response, truncates to the input length, and
    rescales to the input power.
    """
    if kind not in NOISE_KINDS:
        raise DataError(f"unknown noise kind {kind!r}")
    if len(asset) == 0:
        raise DataError("empty noise asset")
    rng = as_rng(rng)
    sig_power = float(np.mean(w.samples ** 2))
    if sig_power <= 0.0:
        raise NumericsError("zero-power signal: SNR undefined")

    if kind == "reverb":
        full = np.convolve(w.samples, asset.samples)[: len(w)]
        out_power = float(np.mean(full ** 2))
        if out_power <= 0.0:
            raise NumericsError("zero-power impulse response")
        return Waveform(full * np.sqrt(sig_power / out_power), w.sample_rate)

    if not np.isfinite(snr_db):
        raise DataError(f"snr must be finite, got {snr_db}")
    if snr_db >= 100.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    if len(asset) >= len(w):
        start = int(rng.integers(0, len(asset) - len(w) + 1))
        segment = asset.samples[start : start + len(w)]
    else:
        reps = int(np.ceil(len(w) / len(asset)))
        segment = np.tile(asset.samples, reps)[: len(w)]
    noise_power = float(np.mean(segment ** 2))
    if noise_power <= 0.0:
        raise NumericsError("zero-power noise asset: SNR undefined")
    gain = np.sqrt(sig_power / (noise_power * 10.0 ** (snr_db / 10.0)))
    return Waveform(w.samples + gain * segment, w.sample_rate)


# ---------------------------------------------------------------------------
# filterbank features
# ---------------------------------------------------------------------------

def _hz_to_mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0))


def mel_filterbank(num_bins: int, n_fft: int, sample_rate: int,
                   low_hz: float = 20.0, high_hz: float = 7600.0) -> np.ndarray:
    """Triangular mel filters on rfft bin frequencies, (num_bins, n_fft//2+1)."""
    if high_hz > sample_rate / 2:
        raise DataError(f"mel high cutoff {high_hz} above Nyquist {sample_rate / 2}")
    mel_points = np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz), num_bins + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    filters = np.zeros((num_bins, len(bin_freqs)))
    for b in range(num_bins):
        left, center, right = hz_points[b], hz_points[b + 1], hz_points[b + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        filters[b] = np.clip(np.minimum(up, down), 0.0, None)
    return filters


def fbank(w: Waveform, num_bins: int = 80, frame_length_ms: float = 25.0,
          frame_shift_ms: float = 10.0, low_hz: float = 20.0, high_hz: float = 7600.0,
          log_floor: float = 1e-10) -> FeatureMatrix:
    """Log-mel filterbank energies, one row per 25 ms frame at 10 ms shift."""
    frame_len = int(round(w.sample_rate * frame_length_ms / 1000.0))
    shift = int(round(w.sample_rate * frame_shift_ms / 1000.0))
    if len(w) < frame_len:
        raise DataError(f"waveform too short for one frame: {len(w)} < {frame_len}")
    n_fft = 1
    while n_fft < frame_len:
        n_fft *= 2
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, frame_len)[::shift]
    window = np.hamming(frame_len)
    spectrum = np.fft.rfft(frames * window, n=n_fft)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    filters = mel_filterbank(num_bins, n_fft, w.sample_rate, low_hz, high_hz)
    energies = power @ filters.T
    return FeatureMatrix(np.log(np.maximum(energies, log_floor)),
                         frame_shift_ms=frame_shift_ms, frame_length_ms=frame_length_ms)


def sliding_cmn(f: FeatureMatrix, window: int = 300) -> FeatureMatrix:
    """Subtract the mean of a centered window (clipped at the edges) per dim.

    Every window has length min(window, T), so T <= window reduces to global
    mean subtraction.
    """
    if window < 1:
        raise DataError(f"cmn window must be >= 1, got {window}")
    x = f.frames
    T = x.shape[0]
    eff = min(window, T)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    starts = np.arange(T) - window // 2
    starts = np.clip(starts, 0, T - eff)
    means = (csum[starts + eff] - csum[starts]) / eff
    return FeatureMatrix(x - means, frame_shift_ms=f.frame_shift_ms,
                         frame_length_ms=f.frame_length_ms)


# ---------------------------------------------------------------------------
# online pipeline and offline plan
# ---------------------------------------------------------------------------

@dataclass
class AugmentTrace:
    speed_ratio: float
    noise_kind: str | None
    snr_db: float | None
    crop_start: int


def online_augment(w: Waveform, cfg: AugmentConfig, rng, return_trace: bool = False):
    """Five-step online pipeline; deterministic given (waveform, cfg, rng seed)."""
    if len(w) == 0:
        raise DataError("empty waveform")
    rng = as_rng(rng)

    # 1. speed perturbation
    ratio = cfg.speed_ratios[int(rng.integers(len(cfg.speed_ratios)))]
    x = speed_perturb(w, ratio)

    # 2. noise decision and type
    noise_kind, snr = None, None
    if rng.random() < cfg.noise_probability:
        noise_kind = cfg.noise_types[int(rng.integers(len(cfg.noise_types)))]
        assets = cfg.noise_assets()[noise_kind]
        asset = assets[int(rng.integers(len(assets)))]
        if noise_kind == "reverb":
            x = apply_noise(x, noise_kind, asset, rng=rng)
        else:
            lo, hi = cfg.snr_ranges[noise_kind]
            snr = float(rng.uniform(lo, hi))
            x = apply_noise(x, noise_kind, asset, snr, rng=rng)

    # 3. segment crop (wrap-pad short audio)
    seg_len = int(round(cfg.segment_seconds * cfg.sample_rate))
    samples = x.samples
    if len(samples) < seg_len:
        samples = np.resize(samples, seg_len)
    start = int(rng.integers(0, len(samples) - seg_len + 1))
    segment = Waveform(samples[start : start + seg_len], cfg.sample_rate)

    # 4 + 5. fbank, then sliding-window mean normalization
    feats = sliding_cmn(fbank(segment, num_bins=cfg.num_mel_bins), window=cfg.cmn_window)

    if return_trace:
        return feats, AugmentTrace(ratio, noise_kind, snr, start)
    return feats


def offline_plan(m: Manifest, cfg: AugmentConfig) -> Manifest:
    """Expand a manifest into the offline augmentation plan.

    Per utterance: every speed ratio, each as one clean copy plus one copy per
    noise type.  Defaults give 15 entries per utterance and 3x the speakers.
    """
    entries = []
    for e in m.entries:
        for ratio in cfg.speed_ratios:
            spk = derived_speaker(e.speaker, ratio) if e.speaker is not None else None
            duration = e.duration / ratio
            entries.append(ManifestEntry(derived_utt(e.utt, ratio), spk, e.domain,
                                         duration, ratio, "clean"))
            for kind in cfg.noise_types:
                entries.append(ManifestEntry(derived_utt(e.utt, ratio, kind), spk,
                                             e.domain, duration, ratio, kind))
    return Manifest(entries)
