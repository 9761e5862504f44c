"""Deterministic synthetic corpus for exercising the pipeline without real data.

Bona fide clips are harmonic tone complexes with vibrato, per-harmonic
frequency jitter, formant-shaped amplitudes, a syllabic envelope and a
filtered noise floor. Spoof clips come from the same generator with reduced
jitter, then pass through STFT phase quantization and a few narrow notch
filters. Both classes are normalized to loudness drawn from one shared
distribution, so level carries no class information.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from racl.audio import AudioClip, ManifestRow, Provenance, write_manifest, write_wav

SPLITS = (("train", 0.7), ("dev", 0.15), ("eval", 0.15))


@dataclass(frozen=True)
class CorpusSpec:
    n_per_class: int = 200
    duration: float = 64600 / 16000
    seed: int = 688
    sample_rate: int = 16000
    jitter: float = 0.006
    spoof_jitter_scale: float = 0.2
    phase_levels: int = 8
    notches: int = 6
    rms_db_range: tuple[float, float] = (-26.0, -18.0)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


def _smooth_noise(rng, n, cutoff_hz, sr):
    b, a = signal.butter(2, cutoff_hz / (sr / 2))
    x = signal.lfilter(b, a, rng.standard_normal(n))
    return x / (np.std(x) + 1e-12)


def harmonic_source(spec: CorpusSpec, rng: np.random.Generator, jitter: float) -> np.ndarray:
    sr, n = spec.sample_rate, spec.n_samples
    t = np.arange(n) / sr
    f0 = rng.uniform(90.0, 240.0)
    vib_rate, vib_depth = rng.uniform(4.0, 7.0), rng.uniform(0.005, 0.02)
    glide = rng.uniform(-0.15, 0.15)
    f0_track = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    f0_track *= 1.0 + glide * t / t[-1]

    formants = [(rng.uniform(300, 900), rng.uniform(80, 160)),
                (rng.uniform(900, 2500), rng.uniform(120, 250)),
                (rng.uniform(2500, 3800), rng.uniform(200, 400))]
    tilt = rng.uniform(0.6, 1.2)
    n_harm = int(min(60, 7000 // (f0 * 1.2)))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        wander = 1.0 + jitter * _smooth_noise(rng, n, 20.0, sr)
        freq = k * f0_track * wander
        phase = 2 * np.pi * np.cumsum(freq) / sr + rng.uniform(0, 2 * np.pi)
        fk = k * f0
        env = k ** (-tilt) * (0.05 + sum(np.exp(-0.5 * ((fk - c) / bw) ** 2) for c, bw in formants))
        x += env * np.sin(phase)

    syll = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    x *= np.clip(syll, 0.1, None)
    b, a = signal.butter(2, [200 / (sr / 2), 6000 / (sr / 2)], btype="band")
    floor = signal.lfilter(b, a, rng.standard_normal(n))
    x += floor * (np.std(x) / np.std(floor)) * 10 ** (-30 / 20)
    return x


def spoof_artifacts(x: np.ndarray, spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    _, _, z = signal.stft(x, fs=sr, nperseg=512, noverlap=384)
    step = 2 * np.pi / spec.phase_levels
    z = np.abs(z) * np.exp(1j * step * np.round(np.angle(z) / step))
    _, y = signal.istft(z, fs=sr, nperseg=512, noverlap=384)
    y = y[: len(x)]
    for _ in range(spec.notches):
        b, a = signal.iirnotch(rng.uniform(800.0, 6000.0), Q=4.0, fs=sr)
        y = signal.lfilter(b, a, y)
    return y


def _normalize(x: np.ndarray, spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    target = 10 ** (rng.uniform(*spec.rms_db_range) / 20)
    x = x * (target / np.sqrt(np.mean(x * x)))
    peak = np.max(np.abs(x))
    return x / peak * 0.99 if peak > 0.99 else x


def make_clip(spec: CorpusSpec, provenance: Provenance, index: int) -> AudioClip:
    class_id = 0 if provenance is Provenance.BONAFIDE else 1
    rng = np.random.default_rng([spec.seed, class_id, index])
    if class_id == 0:
        x = harmonic_source(spec, rng, spec.jitter)
    else:
        x = harmonic_source(spec, rng, spec.jitter * spec.spoof_jitter_scale)
        x = spoof_artifacts(x, spec, rng)
    x = _normalize(x, spec, rng)
    return AudioClip(x, spec.sample_rate, provenance, f"{provenance.value}_{index:05d}")


def split_of(index: int, n: int) -> str:
    edge = 0.0
    for name, frac in SPLITS:
        edge += frac
        if index < round(edge * n):
            return name
    return SPLITS[-1][0]


def generate(spec: CorpusSpec, out_dir, workers: int = 1, pools: bool = True) -> list[ManifestRow]:
    """Write the corpus, ``manifest.tsv`` and per-split manifests; returns all rows."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(p, i) for p in (Provenance.BONAFIDE, Provenance.SPOOF) for i in range(spec.n_per_class)]

    def work(job):
        prov, i = job
        clip = make_clip(spec, prov, i)
        dest = wav_dir / f"{clip.source_id}.wav"
        write_wav(dest, clip)
        return ManifestRow(dest, prov, split_of(i, spec.n_per_class))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]

    meta = {"generator": "racl.synthcorpus", "seed": spec.seed, "n_per_class": spec.n_per_class}
    write_manifest(out_dir / "manifest.tsv", rows, meta)
    for name, _ in SPLITS:
        part = [ManifestRow(r.path, r.provenance, "synth") for r in rows if r.subset == name]
        write_manifest(out_dir / f"{name}.tsv", part, {**meta, "split": name})
    if pools:
        write_pools(spec, out_dir / "pools")
    return rows


def write_pools(spec: CorpusSpec, root, count: int = 4) -> dict[str, str]:
    """Small noise/music/speech/RIR pools in the layout the augmentation config expects."""
    root = Path(root)
    sr = spec.sample_rate
    rng = np.random.default_rng([spec.seed, 0xA06])
    n = sr * 2
    out = {}
    for role in ("noise", "music", "speech", "rir"):
        d = root / role
        d.mkdir(parents=True, exist_ok=True)
        out[role] = str(d)
        for i in range(count if role != "speech" else 2 * count):
            if role == "noise":
                white = rng.standard_normal(n)
                x = signal.lfilter([1.0], [1.0, -rng.uniform(0.0, 0.98)], white)
            elif role == "music":
                t = np.arange(n) / sr
                x = np.zeros(n)
                for _ in range(4):
                    f = 110.0 * 2 ** (rng.integers(0, 36) / 12)
                    onset = rng.integers(0, n // 2)
                    env = np.where(t * sr >= onset, np.exp(-3.0 * np.maximum(t - onset / sr, 0)), 0.0)
                    x += env * sum(np.sin(2 * np.pi * f * h * t) / h for h in range(1, 5))
            elif role == "speech":
                sub = CorpusSpec(n_per_class=1, duration=2.0, seed=spec.seed + 1000 + i, sample_rate=sr)
                x = harmonic_source(sub, np.random.default_rng([sub.seed, 7]), sub.jitter)
            else:
                length = int(sr * rng.uniform(0.1, 0.4))
                decay = np.exp(-np.arange(length) / (sr * rng.uniform(0.02, 0.08)))
                x = rng.standard_normal(length) * decay * 0.3
                x[0] = 1.0
            x = x / np.max(np.abs(x)) * 0.9
            write_wav(d / f"{role}_{i:02d}.wav", AudioClip(x, sr, Provenance.BONAFIDE, f"{role}_{i:02d}"))
    return out
