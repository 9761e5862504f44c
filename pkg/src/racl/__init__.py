"""Hard-sample reconstruction, layer aggregation and RACL training for audio deepfake detection."""

from racl.audio import AudioClip, Provenance, fix_length, read_wav, resample, write_wav

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "Provenance",
    "fix_length",
    "read_wav",
    "resample",
    "write_wav",
]
