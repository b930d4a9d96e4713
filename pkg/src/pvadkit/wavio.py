"""Mono 16-bit PCM WAV reading and writing.

The toolkit deliberately supports exactly one audio container: RIFF WAV,
PCM16, single channel. Stereo or other sample formats are rejected
rather than silently converted.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from . import FormatError


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 WAV file.

    Returns (samples, sample_rate) with samples as float32 in [-1, 1).
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError, OSError) as exc:
        raise FormatError(f"cannot read WAV file {path}: {exc}") from exc
    if n_channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {n_channels} channels")
    if sampwidth != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return samples, rate


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as a mono PCM16 WAV file."""
    samples = np.asarray(samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise FormatError(f"refusing to write non-finite samples to {path}")
    quantized = np.clip(np.rint(samples * 32767.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(quantized.tobytes())
