"""WAV I/O, resampling and fixed-length normalization.

Only two RIFF subformats are handled: 16-bit integer PCM and 32-bit IEEE
float. Everything downstream works on float64 mono samples in [-1, 1].
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal

from racl.errors import (
    EmptyInputError,
    MalformedHeaderError,
    ManifestError,
    UnsupportedEncodingError,
    WavNotFoundError,
)

WORKING_RATE = 16000
TARGET_LEN = 64600

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


class Provenance(str, enum.Enum):
    BONAFIDE = "bonafide"
    SPOOF = "spoof"
    REC_BONAFIDE = "rec_bonafide"
    REC_SPOOF = "rec_spoof"

    def binary(self) -> int:
        """0 for genuine bona fide audio, 1 for every other provenance."""
        return 0 if self is Provenance.BONAFIDE else 1

    def reconstructed(self) -> "Provenance":
        if self in (Provenance.BONAFIDE, Provenance.REC_BONAFIDE):
            return Provenance.REC_BONAFIDE
        return Provenance.REC_SPOOF


PROVENANCE_ORDER = (
    Provenance.BONAFIDE,
    Provenance.SPOOF,
    Provenance.REC_BONAFIDE,
    Provenance.REC_SPOOF,
)


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: Provenance = Provenance.BONAFIDE
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return replace(self, samples=np.asarray(samples, dtype=np.float64))


def read_wav(path, label: Provenance = Provenance.BONAFIDE, source_id: str | None = None) -> AudioClip:
    path = Path(path)
    if not path.is_file():
        raise WavNotFoundError(f"{path}: no such file")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedHeaderError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _FMT_EXTENSIBLE:
                if len(body) < 26:
                    raise MalformedHeaderError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE")
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            if len(body) < size:
                raise MalformedHeaderError(f"{path}: data chunk truncated")
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise MalformedHeaderError(f"{path}: missing fmt or data chunk")
    code, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedHeaderError(f"{path}: invalid channel count or sample rate")

    if code == _FMT_PCM and bits == 16:
        frames = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)], dtype="<i2")
        samples = frames.astype(np.float64) / 32768.0
    elif code == _FMT_FLOAT and bits == 32:
        frames = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)], dtype="<f4")
        samples = frames.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: format code {code} with {bits} bits per sample")

    samples = samples.reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise UnsupportedEncodingError(f"{path}: non-finite float samples")
    return AudioClip(samples, rate, label, source_id if source_id is not None else path.stem)


def _quantize16(samples: np.ndarray) -> np.ndarray:
    scaled = np.clip(samples, -1.0, 1.0) * 32768.0
    # round half away from zero
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(path, clip: AudioClip, float32: bool = False) -> None:
    path = Path(path)
    if float32:
        payload = np.asarray(clip.samples, dtype="<f4").tobytes()
        code, bits = _FMT_FLOAT, 32
    else:
        payload = _quantize16(clip.samples).tobytes()
        code, bits = _FMT_PCM, 16
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        code,
        1,
        clip.sample_rate,
        clip.sample_rate * block,
        block,
        bits,
        b"data",
        len(payload),
    )
    path.write_bytes(header + payload)


@lru_cache(maxsize=32)
def _resample_filter(up: int, down: int, half_width: int, beta: float) -> np.ndarray:
    max_rate = max(up, down)
    h = signal.firwin(2 * half_width * max_rate + 1, 1.0 / max_rate, window=("kaiser", beta))
    h.setflags(write=False)
    return h


def resample(clip: AudioClip, target_rate: int, half_width: int = 32, beta: float = 8.0) -> AudioClip:
    """Polyphase windowed-sinc resampling (Kaiser window)."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    g = gcd(int(target_rate), int(clip.sample_rate))
    up, down = target_rate // g, clip.sample_rate // g
    h = _resample_filter(up, down, half_width, beta).copy()  # resample_poly scales h in place
    out = signal.resample_poly(clip.samples, up, down, window=h)
    return replace(clip, samples=out, sample_rate=int(target_rate))


def fix_length(clip: AudioClip, target_len: int = TARGET_LEN) -> AudioClip:
    """Truncate to the leading ``target_len`` samples or repeat the clip cyclically."""
    n = len(clip)
    if n == 0:
        raise EmptyInputError(f"cannot fix length of empty clip {clip.source_id!r}")
    if target_len <= 0:
        raise ValueError("target_len must be positive")
    if n >= target_len:
        return clip.with_samples(clip.samples[:target_len].copy())
    reps = -(-target_len // n)
    return clip.with_samples(np.tile(clip.samples, reps)[:target_len])


def load_clip(path, label: Provenance, source_id: str | None = None,
              sample_rate: int = WORKING_RATE, target_len: int = TARGET_LEN) -> AudioClip:
    clip = read_wav(path, label, source_id)
    return fix_length(resample(clip, sample_rate), target_len)


# --------------------------------------------------------------------------
# Manifests: UTF-8 TSV rows of path<TAB>provenance[<TAB>subset]; lines
# starting with '#' carry metadata (e.g. config_hash=...).
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    path: Path
    provenance: Provenance
    subset: str = ""

    @property
    def source_id(self) -> str:
        return self.path.stem


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise ManifestError(f"{path}:{lineno}: expected path<TAB>provenance")
        try:
            prov = Provenance(cols[1].strip())
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: unknown provenance {cols[1]!r}") from None
        p = Path(cols[0])
        if not p.is_absolute():
            p = path.parent / p
        rows.append(ManifestRow(p, prov, cols[2].strip() if len(cols) > 2 else ""))
    return rows


def manifest_metadata(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") and "=" in line:
            k, v = line[1:].strip().split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def write_manifest(path, rows, metadata: dict | None = None) -> None:
    path = Path(path)
    lines = [f"# {k}={v}" for k, v in (metadata or {}).items()]
    base = path.parent.absolute()
    for row in rows:
        # paths are stored relative to the manifest so a corpus tree can be moved as a whole
        try:
            rel = Path(os.path.relpath(Path(row.path).absolute(), base))
        except ValueError:  # different drive on Windows
            rel = Path(row.path).absolute()
        cols = [rel.as_posix(), row.provenance.value]
        if row.subset:
            cols.append(row.subset)
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
