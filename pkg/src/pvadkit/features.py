"""Log-mel filterbank feature frontend.

Converts mono PCM audio into sequences of 40-dimensional log-mel frame
features: 25 ms periodic-Hann windows every 10 ms, power spectrum on a
512-point FFT, triangular mel filters spanning 0 Hz to Nyquist, natural
log with a fixed floor. Values and defaults are plain data so every
stage can be recomputed independently in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ConfigError, FormatError

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class FeatureConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mels: int = 40
    fft_size: int = 512
    fmin_hz: float = 0.0
    fmax_hz: float | None = None  # None means Nyquist
    log_floor: float = 1e-10
    # affine output normalization (frames - shift) / scale; the raw log
    # scale spans roughly [ln(log_floor), 0] and saturates unit-scale
    # recurrent nets, so model pipelines turn this on
    norm_shift: float = 0.0
    norm_scale: float = 1.0

    def frame_length(self, sample_rate_hz: int) -> int:
        return int(round(self.frame_length_ms * sample_rate_hz / 1000.0))

    def frame_shift(self, sample_rate_hz: int) -> int:
        return int(round(self.frame_shift_ms * sample_rate_hz / 1000.0))

    def band_edges(self, sample_rate_hz: int) -> tuple[float, float]:
        fmax = sample_rate_hz / 2.0 if self.fmax_hz is None else self.fmax_hz
        return self.fmin_hz, fmax

    def validate(self, sample_rate_hz: int) -> None:
        if sample_rate_hz <= 0:
            raise ConfigError(f"sample rate must be positive, got {sample_rate_hz}")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be > 0, got {self.log_floor}")
        if self.norm_scale <= 0:
            raise ConfigError(f"norm_scale must be > 0, got {self.norm_scale}")
        frame_len = self.frame_length(sample_rate_hz)
        if self.fft_size < frame_len or self.fft_size & (self.fft_size - 1):
            raise ConfigError(
                f"fft_size must be a power of two >= frame length "
                f"({frame_len} samples), got {self.fft_size}"
            )
        fmin, fmax = self.band_edges(sample_rate_hz)
        if not 0 <= fmin < fmax <= sample_rate_hz / 2.0:
            raise ConfigError(f"invalid mel band edges [{fmin}, {fmax}]")


@dataclass
class AudioBuffer:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate_hz <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.ndim != 1:
            raise FormatError(f"expected mono 1-D audio, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise FormatError("audio contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class FeatureSequence:
    """T x n_mels matrix of log-mel frame features."""

    frames: np.ndarray
    frame_shift_ms: float = 10.0
    source_id: str = ""

    def __len__(self) -> int:
        return self.frames.shape[0]


def frame_count(n_samples: int, cfg: FeatureConfig, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> int:
    """Number of full analysis windows that fit into ``n_samples``."""
    if n_samples < 0:
        raise ConfigError(f"n_samples must be >= 0, got {n_samples}")
    frame_len = cfg.frame_length(sample_rate_hz)
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // cfg.frame_shift(sample_rate_hz) + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann_periodic(n: int) -> np.ndarray:
    # periodic variant: 0.5 - 0.5*cos(2*pi*k/n), k = 0..n-1
    k = np.arange(n, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def mel_filterbank(cfg: FeatureConfig, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filters as an (n_mels, fft_size//2 + 1) matrix.

    Filter centers are spaced uniformly on the mel scale between the
    configured band edges; triangles peak at 1 and reach zero at the
    neighbouring centers.
    """
    cfg.validate(sample_rate_hz)
    fmin, fmax = cfg.band_edges(sample_rate_hz)
    n_bins = cfg.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins, dtype=np.float64) * sample_rate_hz / cfg.fft_size

    mel_edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    hz_edges = mel_to_hz(mel_edges)

    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, center, hi = hz_edges[m], hz_edges[m + 1], hz_edges[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))

    if np.any(fb.sum(axis=1) == 0.0):
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for fft_size={cfg.fft_size}: "
            "some filters cover no FFT bin"
        )
    return fb


def filter_center_freqs(cfg: FeatureConfig, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    fmin, fmax = cfg.band_edges(sample_rate_hz)
    mel_edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_edges[1:-1])


def log_mel(audio: AudioBuffer, cfg: FeatureConfig = FeatureConfig(),
            source_id: str = "") -> FeatureSequence:
    """Compute the log-mel feature sequence of a waveform.

    frames[t] = ln(max(filterbank @ |FFT(hann * frame_t)|^2, log_floor))
    """
    cfg.validate(audio.sample_rate_hz)
    if not np.all(np.isfinite(audio.samples)):
        raise FormatError("audio contains non-finite samples")

    frame_len = cfg.frame_length(audio.sample_rate_hz)
    shift = cfg.frame_shift(audio.sample_rate_hz)
    n_frames = frame_count(len(audio.samples), cfg, audio.sample_rate_hz)
    if n_frames == 0:
        return FeatureSequence(np.zeros((0, cfg.n_mels), dtype=np.float32),
                               cfg.frame_shift_ms, source_id)

    samples = np.asarray(audio.samples, dtype=np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::shift]
    windows = windows[:n_frames] * hann_periodic(frame_len)

    spectrum = np.fft.rfft(windows, n=cfg.fft_size, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    mel_power = power @ mel_filterbank(cfg, audio.sample_rate_hz).T
    frames = np.log(np.maximum(mel_power, cfg.log_floor))
    if cfg.norm_shift != 0.0 or cfg.norm_scale != 1.0:
        frames = (frames - cfg.norm_shift) / cfg.norm_scale
    return FeatureSequence(frames.astype(np.float32), cfg.frame_shift_ms,
                           source_id)
