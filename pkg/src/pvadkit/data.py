"""Corpus construction and augmentation.

Synthetic desk-scale speech: each speaker is a fixed fundamental
frequency (80-300 Hz) plus three fixed formant resonances; utterances
are harmonic pulse trains through the speaker's formant cascade with
slow amplitude modulation, separated by true-zero silences, so
framewise speech labels are exact by construction.

Multi-speaker training utterances concatenate 1-3 single-speaker
utterances and relabel frames into {ns=0, tss=1, ntss=2} relative to a
uniformly chosen target speaker. Multistyle training (MTR) adds a
random room impulse response and a random training noise type at a
random SNR, each with probability 0.5; labels never change. The test
matrix pairs 4 noise types with 6 SNRs (24 conditions); cafe noise is
excluded from the default training pool so it stays unseen.

A frame is speech when at least 50% of its samples lie in a voiced
region. SNR is defined over the full utterance extent (not only
speech frames): 10*log10(mean(s^2)/mean(n^2)).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sig

from . import ConfigError, FormatError
from .features import DEFAULT_SAMPLE_RATE, FeatureConfig, frame_count
from .util import substream
from . import wavio

NS, TSS, NTSS = 0, 1, 2

TRAIN_NOISE_TYPES = ("babble", "bus", "pedestrian", "street", "speech_shaped")
TEST_NOISE_TYPES = ("babble", "bus", "cafe", "speech_shaped")
ALL_NOISE_TYPES = ("babble", "bus", "cafe", "pedestrian", "street", "speech_shaped")
TEST_SNRS_DB = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0)


# ---------------------------------------------------------------------------
# synthetic speakers


@dataclass(frozen=True)
class SpeakerVoice:
    speaker_id: str
    f0_hz: float
    formants_hz: tuple        # 3 center frequencies
    bandwidths_hz: tuple      # matching -3 dB bandwidths
    am_rate_hz: float         # syllable-like amplitude modulation


@dataclass
class UtteranceRecord:
    speaker_id: str
    utt_id: str
    samples: np.ndarray       # float32 waveform
    voiced_mask: np.ndarray   # bool per sample
    sample_rate: int = DEFAULT_SAMPLE_RATE
    audio_path: str | None = None
    speech_frames: np.ndarray | None = None  # cached framewise labels

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def record_speech_frames(rec: UtteranceRecord,
                         cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Framewise speech labels of a record, cached when loaded from disk."""
    if rec.speech_frames is None:
        rec.speech_frames = frame_speech_labels(rec.voiced_mask, cfg,
                                                rec.sample_rate)
    return rec.speech_frames


def speaker_voice(seed: int, speaker_index: int) -> SpeakerVoice:
    """Deterministic per-speaker voice parameters."""
    rng = substream(seed, "voice", speaker_index)
    f0 = float(rng.uniform(80.0, 300.0))
    formants = (float(rng.uniform(300.0, 900.0)),
                float(rng.uniform(1000.0, 2200.0)),
                float(rng.uniform(2300.0, 3400.0)))
    bandwidths = tuple(float(rng.uniform(60.0, 130.0)) for _ in range(3))
    am_rate = float(rng.uniform(2.0, 6.0))
    return SpeakerVoice(f"spk{speaker_index:03d}", f0, formants, bandwidths,
                        am_rate)


def _formant_filter(voice: SpeakerVoice, x: np.ndarray, sr: int) -> np.ndarray:
    # cascade of 2nd-order resonators, poles at r*exp(+-j*2*pi*f/sr)
    for f, bw in zip(voice.formants_hz, voice.bandwidths_hz):
        r = np.exp(-np.pi * bw / sr)
        a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * f / sr), r * r]
        x = sig.lfilter([1.0 - r], a, x)
    return x


def _voiced_segment(voice: SpeakerVoice, n: int, rng, sr: int) -> np.ndarray:
    period = max(2, int(round(sr / voice.f0_hz)))
    excitation = np.zeros(n)
    excitation[::period] = 1.0
    # 2% aspiration keeps harmonics from being the only content
    excitation += 0.02 * rng.normal(size=n)
    out = _formant_filter(voice, excitation, sr)
    t = np.arange(n) / sr
    phase = rng.uniform(0.0, 2.0 * np.pi)
    out *= 1.0 + 0.45 * np.sin(2.0 * np.pi * voice.am_rate_hz * t + phase)
    fade = min(n // 4, int(0.02 * sr))
    if fade:
        out[:fade] *= np.linspace(0.0, 1.0, fade)
        out[-fade:] *= np.linspace(1.0, 0.0, fade)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.3 / peak
    return out


def synth_utterance(voice: SpeakerVoice, rng, sr: int = DEFAULT_SAMPLE_RATE,
                    noise_floor_db: float | None = None) -> tuple:
    """One utterance: voiced bursts separated by silences.

    Silences are true zeros by default. noise_floor_db, when set, adds a
    white recording floor that many samples below the voiced rms; digitally
    perfect silence is a synthetic artifact no microphone produces, and it
    lets models key on the exact log floor instead of on speech.

    Returns (samples float32, voiced_mask bool), both per sample.
    """
    n_bursts = int(rng.integers(3, 7))
    chunks, mask_chunks = [], []

    def silence(seconds):
        n = int(seconds * sr)
        chunks.append(np.zeros(n))
        mask_chunks.append(np.zeros(n, dtype=bool))

    silence(rng.uniform(0.2, 0.4))
    for b in range(n_bursts):
        n = int(rng.uniform(0.3, 1.2) * sr)
        chunks.append(_voiced_segment(voice, n, rng, sr))
        mask_chunks.append(np.ones(n, dtype=bool))
        silence(rng.uniform(0.15, 0.5) if b < n_bursts - 1 else rng.uniform(0.2, 0.4))

    samples = np.concatenate(chunks)
    mask = np.concatenate(mask_chunks)
    if noise_floor_db is not None:
        # drawn after the bursts so the voiced content is unchanged
        speech_rms = float(np.sqrt(np.mean(np.square(samples[mask]))))
        floor = speech_rms * 10.0 ** (-noise_floor_db / 20.0)
        samples = samples + floor * rng.standard_normal(len(samples))
    return samples.astype(np.float32), mask


def frame_speech_labels(voiced_mask: np.ndarray,
                        cfg: FeatureConfig = FeatureConfig(),
                        sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Frame is speech iff >= 50% of its samples are voiced."""
    mask = np.asarray(voiced_mask, dtype=bool)
    n_frames = frame_count(len(mask), cfg, sr)
    frame_len = cfg.frame_length(sr)
    shift = cfg.frame_shift(sr)
    cum = np.concatenate([[0], np.cumsum(mask)])
    starts = np.arange(n_frames) * shift
    voiced_in_frame = cum[starts + frame_len] - cum[starts]
    return voiced_in_frame * 2 >= frame_len


def synth_corpus(n_speakers: int, utterances_per_speaker: int, seed: int,
                 sr: int = DEFAULT_SAMPLE_RATE,
                 noise_floor_db: float | None = None) -> list:
    """Synthesize the full single-speaker corpus, in memory."""
    if n_speakers < 2:
        raise ConfigError(f"need at least 2 speakers, got {n_speakers}")
    records = []
    for s in range(n_speakers):
        voice = speaker_voice(seed, s)
        for u in range(utterances_per_speaker):
            rng = substream(seed, "utt", s, u)
            samples, mask = synth_utterance(voice, rng, sr, noise_floor_db)
            records.append(UtteranceRecord(
                speaker_id=voice.speaker_id,
                utt_id=f"{voice.speaker_id}_u{u:03d}",
                samples=samples, voiced_mask=mask, sample_rate=sr,
            ))
    return records


# ---------------------------------------------------------------------------
# multi-speaker utterances


@dataclass
class MultiSpeakerUtterance:
    utt_id: str
    samples: np.ndarray          # float32
    segments: list               # (start_frame, end_frame, speaker_id), tiling [0, T)
    target_speaker_id: str
    labels: np.ndarray           # (T,) int8 in {NS, TSS, NTSS}
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def n_frames(self) -> int:
        return len(self.labels)


def make_multispeaker(records: list, rng, utt_id: str = "mix",
                      cfg: FeatureConfig = FeatureConfig()) -> MultiSpeakerUtterance:
    """Concatenate k ~ Uniform{1,2,3} utterances from k distinct speakers.

    The target is uniform among the k; frames are labeled ns / tss /
    ntss from the exact sample-level voiced masks. A frame belongs to
    the segment holding its center sample.
    """
    by_speaker = {}
    for rec in records:
        by_speaker.setdefault(rec.speaker_id, []).append(rec)
    speakers = sorted(by_speaker)
    if len(speakers) < 3:
        raise ConfigError(f"need >= 3 distinct speakers, got {len(speakers)}")

    k = int(rng.integers(1, 4))
    chosen = rng.choice(len(speakers), size=k, replace=False)
    picks = []
    for si in chosen:
        utts = by_speaker[speakers[si]]
        picks.append(utts[int(rng.integers(0, len(utts)))])
    target = picks[int(rng.integers(0, k))].speaker_id

    samples = np.concatenate([p.samples for p in picks])
    voiced = np.concatenate([p.voiced_mask for p in picks])
    sr = picks[0].sample_rate

    n_frames = frame_count(len(samples), cfg, sr)
    shift, frame_len = cfg.frame_shift(sr), cfg.frame_length(sr)
    centers = np.arange(n_frames) * shift + frame_len // 2

    # segment of each frame = owner of its center sample
    sample_bounds = np.cumsum([len(p.samples) for p in picks])
    owner = np.searchsorted(sample_bounds, centers, side="right")
    segments = []
    start = 0
    for si in range(len(picks)):
        end = int(np.searchsorted(owner, si, side="right"))
        segments.append((start, end, picks[si].speaker_id))
        start = end

    speech = frame_speech_labels(voiced, cfg, sr)
    owner_ids = np.array([p.speaker_id for p in picks])
    labels = np.where(speech,
                      np.where(owner_ids[owner] == target, TSS, NTSS),
                      NS).astype(np.int8)
    return MultiSpeakerUtterance(
        utt_id=utt_id, samples=samples, segments=segments,
        target_speaker_id=target, labels=labels, sample_rate=sr,
    )


# ---------------------------------------------------------------------------
# mixing, reverberation, noise bank


def mix_at_snr(signal_: np.ndarray, noise: np.ndarray, snr_db: float,
               rng=None) -> tuple:
    """Add noise scaled to an exact SNR; returns (mixed, scaled_noise).

    Powers are mean squares over the full extent in float64. Longer
    noise is randomly cropped (rng required); shorter noise is tiled.
    If the mix would clip, signal and noise are rescaled together, so
    the ratio is preserved.
    """
    s = np.asarray(signal_, dtype=np.float64)
    n = np.asarray(noise, dtype=np.float64)
    if s.size == 0 or n.size == 0:
        raise ConfigError("empty signal or noise")
    if n.size < s.size:
        n = np.tile(n, int(np.ceil(s.size / n.size)))[:s.size]
    elif n.size > s.size:
        if rng is None:
            raise ConfigError("rng required to crop noise longer than signal")
        off = int(rng.integers(0, n.size - s.size + 1))
        n = n[off:off + s.size]

    p_signal = float(np.mean(s * s))
    p_noise = float(np.mean(n * n))
    if p_signal <= 0.0 or p_noise <= 0.0:
        raise ConfigError("zero-power signal or noise")
    scale = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = scale * n
    mixed = s + scaled
    peak = float(np.max(np.abs(mixed)))
    if peak > 0.999:
        mixed *= 0.999 / peak
        scaled *= 0.999 / peak
    return mixed.astype(np.float32), scaled.astype(np.float32)


def measured_snr_db(signal_: np.ndarray, noise: np.ndarray) -> float:
    s = np.asarray(signal_, dtype=np.float64)
    n = np.asarray(noise, dtype=np.float64)
    return 10.0 * np.log10(np.mean(s * s) / np.mean(n * n))


def apply_rir(signal_: np.ndarray, rir: np.ndarray) -> np.ndarray:
    """Convolve with a room impulse response; length and peak preserved."""
    s = np.asarray(signal_, dtype=np.float64)
    r = np.asarray(rir, dtype=np.float64)
    if r.size == 0 or not np.any(r):
        raise ConfigError("empty or all-zero rir")
    wet = sig.fftconvolve(s, r)[:s.size]
    dry_peak = float(np.max(np.abs(s)))
    wet_peak = float(np.max(np.abs(wet)))
    if dry_peak > 0.0 and wet_peak > 0.0:
        wet *= dry_peak / wet_peak
    return wet.astype(np.float32)


def synthetic_rir(rt60_s: float, rng, sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying noise tail after a unit direct path."""
    if rt60_s <= 0:
        raise ConfigError(f"rt60 must be positive, got {rt60_s}")
    n = int(rt60_s * sr)
    t = np.arange(n) / sr
    tail = rng.normal(size=n) * np.exp(-6.907 * t / rt60_s)  # -60 dB at rt60
    rir = np.concatenate([[1.0], 0.3 * tail])
    return rir.astype(np.float32)


def default_rir_pool(seed: int, sr: int = DEFAULT_SAMPLE_RATE) -> list:
    return [synthetic_rir(rt60, substream(seed, "rir", i), sr)
            for i, rt60 in enumerate((0.2, 0.35, 0.5, 0.65, 0.8))]


def _bandpass(x, lo, hi, sr):
    sos = sig.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return sig.sosfilt(sos, x)


def make_noise_bank(seed: int, duration_s: float = 30.0,
                    sr: int = DEFAULT_SAMPLE_RATE) -> dict:
    """Generate all 6 noise types as named waveforms.

    babble = 6 overlapped synthetic speakers; speech_shaped = white
    noise matched to babble's average spectrum; the rest are filtered
    noise with distinct fixed spectral profiles.
    """
    if duration_s < 1.0:
        raise ConfigError(f"noise bank needs >= 1 s per type, got {duration_s}")
    n = int(duration_s * sr)
    bank = {}

    voices = [speaker_voice(seed, 1000 + i) for i in range(6)]
    babble = np.zeros(n)
    for i, voice in enumerate(voices):
        rng = substream(seed, "noise", "babble", i)
        track = []
        total = 0
        while total < n:
            samples, mask = synth_utterance(voice, rng, sr)
            chunk = samples[np.argmax(mask):].astype(np.float64)  # skip lead-in
            track.append(chunk)
            total += chunk.size
        babble += np.concatenate(track)[:n]
    bank["babble"] = babble / 6.0

    # white noise shaped to the average babble magnitude spectrum
    rng = substream(seed, "noise", "speech_shaped")
    block = min(4000, n)
    usable = (n // block) * block
    spec = np.abs(np.fft.rfft(bank["babble"][:usable].reshape(-1, block),
                              axis=1)).mean(axis=0)
    kernel = np.fft.irfft(spec / spec.max())
    mid = kernel.size // 2
    half = min(400, mid)
    kernel = np.roll(kernel, mid)[mid - half:mid + half + 1]  # linear phase
    shaped = sig.fftconvolve(rng.normal(size=n + 2 * half), kernel)[2 * half:2 * half + n]
    bank["speech_shaped"] = shaped

    rng = substream(seed, "noise", "bus")
    low = sig.sosfilt(sig.butter(4, 350.0, btype="lowpass", fs=sr, output="sos"),
                      rng.normal(size=n))
    bank["bus"] = low * (1.0 + 0.3 * np.sin(2 * np.pi * 0.7 *
                                            np.arange(n) / sr))

    rng = substream(seed, "noise", "cafe")
    base = _bandpass(rng.normal(size=n), 250.0, 3200.0, sr)
    clinks = np.zeros(n)
    for pos in rng.integers(0, max(1, n - sr // 4), size=int(duration_s * 2)):
        length = sr // 8
        clinks[pos:pos + length] += (
            rng.normal(size=length)
            * np.exp(-np.arange(length) / (0.01 * sr))
            * rng.uniform(2.0, 6.0)
        )
    bank["cafe"] = base + _bandpass(clinks, 1500.0, 6000.0, sr) + 0.15 * bank["babble"]

    rng = substream(seed, "noise", "pedestrian")
    ped = _bandpass(rng.normal(size=n), 80.0, 1200.0, sr)
    thump_env = 1.0 + 0.8 * np.clip(np.sin(2 * np.pi * 1.8 * np.arange(n) / sr), 0, 1)
    bank["pedestrian"] = ped * thump_env

    rng = substream(seed, "noise", "street")
    tilt = sig.lfilter([1.0], [1.0, -0.97], rng.normal(size=n))  # 1/f-ish
    bank["street"] = _bandpass(tilt, 40.0, 5000.0, sr)

    for name, wav in bank.items():
        peak = np.max(np.abs(wav))
        if peak <= 0:
            raise ConfigError(f"generated {name} noise is silent")
        bank[name] = (0.3 * wav / peak).astype(np.float32)
    return bank


def save_noise_bank(bank: dict, out_dir, sr: int = DEFAULT_SAMPLE_RATE) -> None:
    for name, wav in bank.items():
        wavio.write_wav(Path(out_dir) / f"{name}.wav", wav, sr)


def load_noise_bank(bank_dir) -> dict:
    bank = {}
    for path in sorted(Path(bank_dir).glob("*.wav")):
        samples, _ = wavio.read_wav(path)
        bank[path.stem] = samples
    if not bank:
        raise FormatError(f"no noise WAVs found in {bank_dir}")
    return bank


# ---------------------------------------------------------------------------
# multistyle training


@dataclass(frozen=True)
class MtrConfig:
    noise_types: tuple = TRAIN_NOISE_TYPES
    snr_range_db: tuple = (-5.0, 20.0)
    p_noise: float = 0.5
    p_rir: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p_noise <= 1.0 or not 0.0 <= self.p_rir <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.snr_range_db[0] > self.snr_range_db[1]:
            raise ConfigError(f"snr range out of order: {self.snr_range_db}")


def augment_waveform(samples: np.ndarray, cfg: MtrConfig, rng,
                     noise_bank: dict, rir_pool=None) -> np.ndarray:
    """Randomly reverberate then add noise to a waveform.

    Draw order is fixed (rir gate, rir pick, noise gate, noise pick,
    snr, crop) so a given rng stream always produces the same result.
    Returns the input array itself when both gates stay closed.
    """
    if cfg.p_rir > 0 and rng.random() < cfg.p_rir:
        if not rir_pool:
            raise ConfigError("mtr: empty rir pool")
        samples = apply_rir(samples, rir_pool[int(rng.integers(0, len(rir_pool)))])
    if cfg.p_noise > 0 and rng.random() < cfg.p_noise:
        missing = [t for t in cfg.noise_types if t not in noise_bank]
        if missing:
            raise ConfigError(f"mtr: noise bank missing {missing}")
        ntype = cfg.noise_types[int(rng.integers(0, len(cfg.noise_types)))]
        snr = float(rng.uniform(*cfg.snr_range_db))
        samples, _ = mix_at_snr(samples, noise_bank[ntype], snr, rng)
    return samples


def mtr_augment(utt: MultiSpeakerUtterance, cfg: MtrConfig, rng,
                noise_bank: dict, rir_pool: list) -> MultiSpeakerUtterance:
    """Randomly reverberate then add noise; labels are untouched."""
    samples = augment_waveform(utt.samples, cfg, rng, noise_bank, rir_pool)
    if samples is utt.samples:
        return utt
    return MultiSpeakerUtterance(
        utt_id=utt.utt_id, samples=samples, segments=utt.segments,
        target_speaker_id=utt.target_speaker_id, labels=utt.labels,
        sample_rate=utt.sample_rate,
    )


# ---------------------------------------------------------------------------
# test matrix


@dataclass
class TestCondition:
    noise_type: str | None    # None = clean
    snr_db: float | None
    utterances: list          # MultiSpeakerUtterance

    @property
    def name(self) -> str:
        if self.noise_type is None:
            return "clean"
        return f"{self.noise_type}_snr{self.snr_db:g}"


def build_test_matrix(clean_utts: list, noise_bank: dict, seed: int,
                      out_dir=None) -> list:
    """Clean + the 4 x 6 noisy conditions, deterministic given the seed.

    Every condition contains every clean utterance mixed at exactly the
    condition SNR. With out_dir the audio and manifests are also
    written to per-condition subdirectories.
    """
    missing = [t for t in TEST_NOISE_TYPES if t not in noise_bank]
    if missing:
        raise ConfigError(f"noise bank missing test types {missing}")
    if not clean_utts:
        raise ConfigError("no clean test utterances")

    conditions = [TestCondition(None, None, list(clean_utts))]
    for ntype in TEST_NOISE_TYPES:
        for snr in TEST_SNRS_DB:
            utts = []
            for i, utt in enumerate(clean_utts):
                rng = substream(seed, "test-mix", ntype, snr, i)
                mixed, _ = mix_at_snr(utt.samples, noise_bank[ntype], snr, rng)
                utts.append(MultiSpeakerUtterance(
                    utt_id=utt.utt_id, samples=mixed, segments=utt.segments,
                    target_speaker_id=utt.target_speaker_id, labels=utt.labels,
                    sample_rate=utt.sample_rate,
                ))
            conditions.append(TestCondition(ntype, snr, utts))

    if out_dir is not None:
        for cond in conditions:
            cond_dir = Path(out_dir) / cond.name
            for utt in cond.utterances:
                wavio.write_wav(cond_dir / f"{utt.utt_id}.wav", utt.samples,
                                utt.sample_rate)
            write_multispeaker_manifest(cond_dir / "manifest.jsonl",
                                        cond.utterances)
    return conditions


# ---------------------------------------------------------------------------
# manifests


def rle_encode(labels: np.ndarray) -> list:
    """labels -> [[class, start_frame, end_frame], ...], end exclusive."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return [[int(labels[s]), int(s), int(e)] for s, e in zip(starts, ends)]


def rle_decode(runs: list, n_frames: int) -> np.ndarray:
    labels = np.zeros(n_frames, dtype=np.int8)
    prev_end = 0
    for cls, start, end in runs:
        if start != prev_end or end > n_frames or end <= start:
            raise FormatError(f"bad rle run ({cls}, {start}, {end})")
        labels[start:end] = cls
        prev_end = end
    if prev_end != n_frames:
        raise FormatError(f"rle covers {prev_end} of {n_frames} frames")
    return labels


def write_corpus_manifest(path, records: list, audio_dir=None) -> None:
    """One JSON line per utterance; labels as run-length triples.

    Writes each record's WAV next to the manifest when it has no
    audio_path yet.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(audio_dir) if audio_dir is not None else path.parent
    lines = []
    for rec in records:
        if rec.audio_path is None:
            wav = base / f"{rec.utt_id}.wav"
            wavio.write_wav(wav, rec.samples, rec.sample_rate)
            # stored relative to the manifest so the tree can move
            rec.audio_path = os.path.relpath(wav, path.parent)
        speech = record_speech_frames(rec)
        lines.append(json.dumps({
            "audio_path": rec.audio_path,
            "speaker_id": rec.speaker_id,
            "utt_id": rec.utt_id,
            "sample_rate": rec.sample_rate,
            "labels": rle_encode(speech.astype(np.int8)),
        }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def read_corpus_manifest(path) -> list:
    """Load single-speaker records back from a manifest.

    The exact framewise labels come from the manifest; the per-sample
    voiced mask is only reconstructed at frame-shift resolution.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    cfg = FeatureConfig()
    records = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            samples, sr = wavio.read_wav(path.parent / rec["audio_path"])
            n_frames = frame_count(len(samples), cfg, sr)
            speech = rle_decode(rec["labels"], n_frames).astype(bool)
            shift = cfg.frame_shift(sr)
            mask = np.zeros(len(samples), dtype=bool)
            for t in np.flatnonzero(speech):
                mask[t * shift:(t + 1) * shift] = True
            records.append(UtteranceRecord(
                speaker_id=rec["speaker_id"], utt_id=rec["utt_id"],
                samples=samples, voiced_mask=mask, sample_rate=sr,
                audio_path=rec["audio_path"], speech_frames=speech,
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
    if not records:
        raise FormatError(f"{path}: empty manifest")
    return records


def write_multispeaker_manifest(path, utts: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in utts:
        lines.append(json.dumps({
            "audio_path": f"{utt.utt_id}.wav",
            "segments": [[int(s), int(e), spk] for s, e, spk in utt.segments],
            "target_speaker_id": utt.target_speaker_id,
            "utt_id": utt.utt_id,
            "sample_rate": utt.sample_rate,
            "labels": rle_encode(utt.labels),
        }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def read_multispeaker_manifest(path) -> list:
    """Load utterances (and their WAVs) back from a manifest."""
    path = Path(path)
    utts = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            samples, sr = wavio.read_wav(path.parent / rec["audio_path"])
            n_frames = frame_count(len(samples), FeatureConfig(), sr)
            utts.append(MultiSpeakerUtterance(
                utt_id=rec["utt_id"],
                samples=samples,
                segments=[(int(s), int(e), spk) for s, e, spk in rec["segments"]],
                target_speaker_id=rec["target_speaker_id"],
                labels=rle_decode(rec["labels"], n_frames),
                sample_rate=int(rec["sample_rate"]),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
    if not utts:
        raise FormatError(f"{path}: empty manifest")
    return utts
