"""Hard-sample generation by mel analysis and Griffin-Lim resynthesis.

The round trip |STFT| -> mel -> pseudo-inverse mel -> Griffin-Lim keeps the
coarse spectral envelope of a clip while discarding its phase and most of its
harmonic fine structure above a few hundred hertz, which is the kind of
generative artifact the detector is trained to notice.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from racl.audio import AudioClip, ManifestRow, load_clip, write_wav
from racl.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SpectrogramConfig:
    fft_size: int = 1024
    hop: int = 256
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    griffin_lim_iters: int = 32
    sample_rate: int = 16000

    def __post_init__(self):
        if self.hop <= 0 or self.hop > self.fft_size:
            raise ConfigError(f"spectrogram.hop must be in (0, fft_size], got {self.hop}")
        if not 0 < self.mel_bins < self.fft_size // 2 + 1:
            raise ConfigError("spectrogram.mel_bins must be below fft_size/2 + 1")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("spectrogram requires 0 <= fmin < fmax <= sample_rate/2")
        if self.griffin_lim_iters < 1:
            raise ConfigError("spectrogram.griffin_lim_iters must be >= 1")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@lru_cache(maxsize=8)
def hann(n: int) -> np.ndarray:
    w = signal.get_window("hann", n, fftbins=True)
    w.setflags(write=False)
    return w


def _frame_count(n: int, hop: int) -> int:
    return 1 + n // hop


def _stft_padded(xp: np.ndarray, n_frames: int, cfg: SpectrogramConfig) -> np.ndarray:
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * hann(cfg.fft_size), axis=1)


def _istft_padded(spec: np.ndarray, padded_len: int, cfg: SpectrogramConfig) -> np.ndarray:
    """Least-squares overlap-add; the orthogonal projection onto consistent spectrograms."""
    w = hann(cfg.fft_size)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * w
    n_frames, n, hop = spec.shape[0], cfg.fft_size, cfg.hop
    out = np.zeros(padded_len)
    if n % hop == 0:
        # hop-sized blocks: block b collects piece r of frame b - r
        r_count = n // hop
        n_blocks = n_frames + r_count - 1
        blocks = np.zeros((n_blocks, hop))
        pieces = frames.reshape(n_frames, r_count, hop)
        for r in range(r_count):
            blocks[r : r + n_frames] += pieces[:, r, :]
        flat = blocks.reshape(-1)[:padded_len]
        out[: flat.shape[0]] = flat
        norm = _window_norm(n_frames, padded_len, cfg)
    else:
        norm = np.zeros(padded_len)
        for f in range(n_frames):
            s = f * hop
            out[s : s + n] += frames[f]
            norm[s : s + n] += w * w
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


@lru_cache(maxsize=16)
def _window_norm(n_frames: int, padded_len: int, cfg: SpectrogramConfig) -> np.ndarray:
    w2 = hann(cfg.fft_size) ** 2
    norm = np.zeros(max(padded_len, (n_frames - 1) * cfg.hop + cfg.fft_size))
    for f in range(n_frames):
        norm[f * cfg.hop : f * cfg.hop + cfg.fft_size] += w2
    norm = norm[:padded_len]
    norm.setflags(write=False)
    return norm


def stft(clip, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Centered, reflection-padded, Hann-windowed one-sided STFT (frames x bins)."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if len(x) < cfg.fft_size:
        raise ShapeError(f"clip of {len(x)} samples is shorter than one {cfg.fft_size}-sample frame")
    pad = cfg.fft_size // 2
    xp = np.pad(x, pad, mode="reflect")
    return _stft_padded(xp, _frame_count(len(x), cfg.hop), cfg)


def istft(spec: np.ndarray, length: int, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    pad = cfg.fft_size // 2
    y = _istft_padded(spec, length + 2 * pad, cfg)
    return y[pad : pad + length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """HTK-scale triangular filters with unit peak, shape (mel_bins, n_bins)."""
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _filterbank_pinv(cfg: SpectrogramConfig) -> np.ndarray:
    p = np.linalg.pinv(mel_filterbank(cfg))
    p.setflags(write=False)
    return p


def mel_project(mag: np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    return np.asarray(mag) @ mel_filterbank(cfg).T


def mel_invert(mel: np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    return np.maximum(np.asarray(mel) @ _filterbank_pinv(cfg).T, 0.0)


def spectral_convergence(spec: np.ndarray, mag: np.ndarray) -> float:
    denom = np.linalg.norm(mag)
    return float(np.linalg.norm(np.abs(spec) - mag) / denom) if denom > 0 else 0.0


def griffin_lim(mag: np.ndarray, cfg: SpectrogramConfig, length: int, seed: int = 0,
                sample_rate: int | None = None) -> tuple[AudioClip, np.ndarray]:
    """Recover a waveform of ``length`` samples from a magnitude spectrogram.

    Returns the clip and the spectral-convergence error after every iteration.
    Iterations run on the padded signal so each istft is an exact projection,
    which makes the error sequence non-increasing.
    """
    mag = np.asarray(mag, dtype=np.float64)
    n_frames = mag.shape[0]
    pad = cfg.fft_size // 2
    padded_len = length + 2 * pad
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    history = np.empty(cfg.griffin_lim_iters)
    y = None
    for it in range(cfg.griffin_lim_iters):
        y = _istft_padded(mag * phase, padded_len, cfg)
        rebuilt = _stft_padded(y, n_frames, cfg)
        history[it] = spectral_convergence(rebuilt, mag)
        amp = np.abs(rebuilt)
        phase = np.where(amp > 1e-12, rebuilt / np.maximum(amp, 1e-12), 1.0)
    out = y[pad : pad + length]
    peak = np.max(np.abs(out)) if length else 0.0
    if peak > 1.0:
        out = out / peak
    return AudioClip(out, sample_rate or cfg.sample_rate), history


def clip_seed(base_seed: int, source_id: str) -> list[int]:
    return [int(base_seed), zlib.crc32(source_id.encode("utf-8"))]


def reconstruct_clip(clip: AudioClip, cfg: SpectrogramConfig = SpectrogramConfig(),
                     seed: int = 0) -> AudioClip:
    mag = np.abs(stft(clip, cfg))
    coarse = mel_invert(mel_project(mag, cfg), cfg)
    rebuilt, _ = griffin_lim(coarse, cfg, len(clip), np.random.SeedSequence(clip_seed(seed, clip.source_id)),
                             clip.sample_rate)
    return replace(rebuilt, label=clip.label.reconstructed(), source_id=clip.source_id + "_rec")


def mel_relative_error(a: AudioClip, b: AudioClip, cfg: SpectrogramConfig = SpectrogramConfig()) -> float:
    ma = mel_project(np.abs(stft(a, cfg)), cfg)
    mb = mel_project(np.abs(stft(b, cfg)), cfg)
    return float(np.linalg.norm(ma - mb) / np.linalg.norm(ma))


def reconstruct_manifest(rows: list[ManifestRow], out_dir, cfg: SpectrogramConfig, seed: int,
                         target_len: int, workers: int = 1) -> tuple[list[ManifestRow], list[str]]:
    """Reconstruct every row into ``out_dir``; returns new rows and per-row error messages."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(row: ManifestRow):
        try:
            clip = load_clip(row.path, row.provenance, row.source_id, cfg.sample_rate, target_len)
        except Exception as exc:  # reported per row, the run continues
            return None, f"{row.path}: {exc}"
        rec = reconstruct_clip(clip, cfg, seed)
        dest = out_dir / f"{rec.source_id}.wav"
        write_wav(dest, rec)
        return ManifestRow(dest, rec.label, row.subset), None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, rows))
    else:
        results = [work(r) for r in rows]
    new_rows = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    return new_rows, errors
