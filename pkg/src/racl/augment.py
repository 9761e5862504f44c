"""Additive noise/music/babble mixing at a target SNR and RIR convolution."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from racl.audio import AudioClip, Provenance, read_wav, resample
from racl.errors import ConfigError, DegeneratePowerError, ShapeError

CATEGORIES = ("none", "noise", "music", "babble", "rir")


@dataclass(frozen=True)
class AugmentConfig:
    noise_snr_db: tuple[float, float] = (0.0, 15.0)
    music_snr_db: tuple[float, float] = (5.0, 15.0)
    speech_snr_db: tuple[float, float] = (13.0, 20.0)
    speech_mix_count: tuple[int, int] = (3, 8)
    # probabilities for none/noise/music/babble/rir, one category per sample
    probabilities: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)

    def __post_init__(self):
        for name in ("noise_snr_db", "music_snr_db", "speech_snr_db", "speech_mix_count"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"augment.{name}: lower bound {lo} exceeds upper bound {hi}")
        lo, hi = self.speech_mix_count
        if lo < 1:
            raise ConfigError("augment.speech_mix_count: lower bound must be >= 1")
        p = self.probabilities
        if len(p) != len(CATEGORIES):
            raise ConfigError(f"augment.probabilities: expected {len(CATEGORIES)} values {CATEGORIES}")
        if any(not 0.0 <= x <= 1.0 for x in p) or sum(p) > 1.0 + 1e-12:
            raise ConfigError("augment.probabilities: each must lie in [0, 1] and sum to at most 1")


def mean_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def snr_gain(signal_power: float, noise_power: float, snr_db: float) -> float:
    """Gain g with 10*log10(signal_power / (g**2 * noise_power)) == snr_db."""
    if signal_power <= 0.0 or noise_power <= 0.0:
        raise DegeneratePowerError(
            f"SNR undefined for signal power {signal_power} and noise power {noise_power}"
        )
    return float(np.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def fit_length(x: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Tile ``x`` cyclically up to ``n`` samples, or cut a random contiguous window."""
    if len(x) == 0:
        raise ShapeError("interferer is empty")
    if len(x) < n:
        return np.tile(x, -(-n // len(x)))[:n]
    if len(x) == n:
        return x
    start = 0 if rng is None else int(rng.integers(0, len(x) - n + 1))
    return x[start : start + n]


def _peak_guard(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x / peak if peak > 1.0 else x


def mix_additive(clip: AudioClip, interferer: AudioClip, snr_db: float,
                 rng: np.random.Generator | None = None, peak_guard: bool = True) -> AudioClip:
    if len(clip) == 0:
        raise ShapeError("clip is empty")
    noise = fit_length(interferer.samples, len(clip), rng)
    g = snr_gain(mean_power(clip.samples), mean_power(noise), snr_db)
    out = clip.samples + g * noise
    return clip.with_samples(_peak_guard(out) if peak_guard else out)


def mix_babble(clip: AudioClip, utterances: list[AudioClip], snr_db: float,
               count_range: tuple[int, int] = (3, 8), rng: np.random.Generator | None = None,
               peak_guard: bool = True) -> AudioClip:
    lo, hi = count_range
    if not lo <= len(utterances) <= hi:
        raise ConfigError(f"babble needs between {lo} and {hi} utterances, got {len(utterances)}")
    babble = np.zeros(len(clip))
    for utt in utterances:
        babble += fit_length(utt.samples, len(clip), rng)
    track = AudioClip(babble, clip.sample_rate, Provenance.BONAFIDE, "babble")
    return mix_additive(clip, track, snr_db, peak_guard=peak_guard)


def convolve_rir(clip: AudioClip, rir: AudioClip, renormalize: bool = True) -> AudioClip:
    if len(rir) == 0:
        raise ShapeError("room impulse response is empty")
    if len(rir) > len(clip):
        raise ShapeError(f"RIR of {len(rir)} samples is longer than the clip ({len(clip)})")
    n = len(clip)
    if len(rir) <= 64:
        wet = np.convolve(clip.samples, rir.samples)[:n]
    else:
        wet = signal.fftconvolve(clip.samples, rir.samples)[:n]
    if renormalize:
        peak_in = np.max(np.abs(clip.samples))
        peak_out = np.max(np.abs(wet))
        if peak_out > 0.0:
            wet = wet * (peak_in / peak_out)
    return clip.with_samples(wet)


@dataclass
class AugmentPools:
    """Interferer clips per category, already at the working rate."""

    noise: list[AudioClip] = field(default_factory=list)
    music: list[AudioClip] = field(default_factory=list)
    speech: list[AudioClip] = field(default_factory=list)
    rir: list[AudioClip] = field(default_factory=list)

    @classmethod
    def from_dirs(cls, dirs: dict[str, str], sample_rate: int) -> "AugmentPools":
        pools = cls()
        for role, d in dirs.items():
            if role not in ("noise", "music", "speech", "rir"):
                raise ConfigError(f"augment pool role {role!r} is not one of noise/music/speech/rir")
            root = Path(d)
            if not root.is_dir():
                raise ConfigError(f"augment pool directory {root} does not exist")
            clips = [resample(read_wav(p), sample_rate) for p in sorted(root.glob("*.wav"))]
            setattr(pools, role, clips)
        return pools

    def available(self, category: str, cfg: AugmentConfig) -> bool:
        if category == "none":
            return True
        if category == "babble":
            return len(self.speech) >= cfg.speech_mix_count[0]
        return len(getattr(self, category)) > 0


def augment_clip(clip: AudioClip, pools: AugmentPools, cfg: AugmentConfig,
                 rng: np.random.Generator) -> tuple[AudioClip, str]:
    """Draw one augmentation category and apply it; unavailable pools fall back to none."""
    category = CATEGORIES[int(rng.choice(len(CATEGORIES), p=_normalized(cfg.probabilities)))]
    if category == "none" or not pools.available(category, cfg) or mean_power(clip.samples) == 0.0:
        return clip, "none"
    if category == "noise":
        src = pools.noise[int(rng.integers(len(pools.noise)))]
        return mix_additive(clip, src, rng.uniform(*cfg.noise_snr_db), rng), category
    if category == "music":
        src = pools.music[int(rng.integers(len(pools.music)))]
        return mix_additive(clip, src, rng.uniform(*cfg.music_snr_db), rng), category
    if category == "babble":
        lo, hi = cfg.speech_mix_count
        k = int(rng.integers(lo, min(hi, len(pools.speech)) + 1))
        picks = rng.choice(len(pools.speech), size=k, replace=False)
        utts = [pools.speech[int(i)] for i in picks]
        snr = rng.uniform(*cfg.speech_snr_db)
        return mix_babble(clip, utts, snr, cfg.speech_mix_count, rng), category
    rir = pools.rir[int(rng.integers(len(pools.rir)))]
    if len(rir) > len(clip):
        rir = rir.with_samples(rir.samples[: len(clip)])
    return convolve_rir(clip, rir), category


def _normalized(p):
    p = np.asarray(p, dtype=np.float64)
    rest = 1.0 - p.sum()
    if rest > 0:
        p = p.copy()
        p[0] += rest  # leftover mass means "no augmentation"
    return p / p.sum()
